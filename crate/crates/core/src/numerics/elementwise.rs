use super::matrix::{Mat, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Applies `op` per element. Binary ops take two equally shaped arguments,
/// unary ops one.
pub fn elementwise<T: Real>(op: Elementwise, args: &[&Mat<T>]) -> Result<Mat<T>> {
    let arity = match op {
        Elementwise::Add | Elementwise::Mul => 2,
        Elementwise::Sigmoid | Elementwise::Tanh => 1,
    };
    if args.len() != arity {
        return Err(Error::Parameter(format!(
            "{op:?} takes {arity} argument(s), got {}",
            args.len()
        )));
    }
    match op {
        Elementwise::Sigmoid => Ok(args[0].map(sigmoid)),
        Elementwise::Tanh => Ok(args[0].map(T::tanh)),
        Elementwise::Add | Elementwise::Mul => {
            let (a, b) = (args[0], args[1]);
            a.check_same(b, "elementwise")?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| if op == Elementwise::Add { x + y } else { x * y })
                .collect();
            Mat::from_vec(a.rows(), a.cols(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn activations_at_zero() {
        let z = Matrix::zeros(2, 3);
        let s = elementwise(Elementwise::Sigmoid, &[&z]).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.5));
        let t = elementwise(Elementwise::Tanh, &[&z]).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sigmoid_of_ln3_is_three_quarters() {
        let m = Matrix::row_vector(&[3f32.ln()]).unwrap();
        let s = elementwise(Elementwise::Sigmoid, &[&m]).unwrap();
        assert!((s.get(0, 0) - 0.75).abs() < 1e-7);
    }

    #[test]
    fn binary_ops_and_errors() {
        let a = Matrix::row_vector(&[1.0, 2.0]).unwrap();
        let b = Matrix::row_vector(&[3.0, 4.0]).unwrap();
        assert_eq!(elementwise(Elementwise::Add, &[&a, &b]).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(elementwise(Elementwise::Mul, &[&a, &b]).unwrap().data(), &[3.0, 8.0]);
        let c = Matrix::row_vector(&[1.0]).unwrap();
        assert!(matches!(elementwise(Elementwise::Add, &[&a, &c]), Err(Error::Shape(_))));
        assert!(matches!(elementwise(Elementwise::Tanh, &[&a, &b]), Err(Error::Parameter(_))));
    }
}
