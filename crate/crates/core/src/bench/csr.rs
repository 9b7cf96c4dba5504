use crate::error::{shape_err, Error, Result};
use crate::numerics::{Matrix, Rng};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f32>,
}

impl CsrMatrix {
    pub fn new(rows: usize, cols: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let m = Self { rows, cols, row_ptr, col_idx, values };
        m.validate()?;
        Ok(m)
    }

    /// Keeps every entry that is not exactly zero.
    pub fn from_dense(w: &Matrix) -> Self {
        let mut row_ptr = Vec::with_capacity(w.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..w.rows() {
            for (c, &v) in w.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Self { rows: w.rows(), cols: w.cols(), row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.rows + 1 {
            return Err(Error::Format(format!("row_ptr has {} entries for {} rows", self.row_ptr.len(), self.rows)));
        }
        if self.row_ptr[0] != 0 {
            return Err(Error::Format("row_ptr must start at 0".into()));
        }
        if let Some(r) = self.row_ptr.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Format(format!("row_ptr decreases at row {r}")));
        }
        let nnz = self.row_ptr[self.rows];
        if nnz != self.values.len() || nnz != self.col_idx.len() {
            return Err(Error::Format(format!(
                "row_ptr ends at {nnz} but there are {} values and {} column indices",
                self.values.len(),
                self.col_idx.len()
            )));
        }
        if let Some(&c) = self.col_idx.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Format(format!("column index {c} outside 0..{}", self.cols)));
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.set(r, self.col_idx[p], self.values[p]);
            }
        }
        out
    }
}

/// `w · x` for CSR `w` on one thread.
pub fn spmm_csr(w: &CsrMatrix, x: &Matrix) -> Result<Matrix> {
    spmm_csr_threaded(w, x, 1)
}

pub fn spmm_csr_threaded(w: &CsrMatrix, x: &Matrix, threads: usize) -> Result<Matrix> {
    w.validate()?;
    if w.cols != x.rows() {
        return shape_err(format!("spmm: {}x{} · {}x{}", w.rows, w.cols, x.rows(), x.cols()));
    }
    Ok(spmm_unchecked(w, x, threads))
}

pub(crate) fn spmm_unchecked(w: &CsrMatrix, x: &Matrix, threads: usize) -> Matrix {
    let n = x.cols();
    let mut out = Matrix::zeros(w.rows, n);
    if n == 0 || w.rows == 0 {
        return out;
    }
    let threads = threads.max(1).min(w.rows);
    let per = w.rows.div_ceil(threads);
    let xd = x.data();
    std::thread::scope(|s| {
        for (t, chunk) in out.data_mut().chunks_mut(per * n).enumerate() {
            let mut body = move || {
                for (lr, orow) in chunk.chunks_mut(n).enumerate() {
                    let r = t * per + lr;
                    for p in w.row_ptr[r]..w.row_ptr[r + 1] {
                        let v = w.values[p];
                        let xrow = &xd[w.col_idx[p] * n..(w.col_idx[p] + 1) * n];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += v * xv;
                        }
                    }
                }
            };
            if threads == 1 {
                body();
            } else {
                s.spawn(body);
            }
        }
    });
    out
}

/// Copy of `w` with exactly `round(s · len)` entries set to zero, the
/// positions drawn uniformly without replacement.
pub fn sparsify_random(w: &Matrix, s: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Parameter(format!("sparsity {s} outside [0, 1)")));
    }
    let n = w.len();
    let zeros = (s * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..zeros {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    let mut out = w.clone();
    for &i in &idx[..zeros] {
        out.data_mut()[i] = 0.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gemm;

    #[test]
    fn sparsify_counts_are_exact() {
        let mut rng = Rng::new(3);
        let w = rng.uniform(0.5, 1.0, 10, 10).unwrap();
        assert_eq!(sparsify_random(&w, 0.0, &mut rng).unwrap(), w);
        let s = sparsify_random(&w, 0.5, &mut rng).unwrap();
        assert_eq!(s.data().iter().filter(|&&v| v == 0.0).count(), 50);
        assert!(sparsify_random(&w, 1.0, &mut rng).is_err());
    }

    #[test]
    fn zero_positions_are_uniform_over_rows_and_columns() {
        // 10^4 trials, 10 zeros each in a 10x10 matrix; 9 degrees of freedom.
        const CHI2_9_P01: f64 = 21.666;
        let mut rng = Rng::new(11);
        let w = Matrix::filled(10, 10, 1.0);
        let (mut by_row, mut by_col) = ([0u64; 10], [0u64; 10]);
        for _ in 0..10_000 {
            let s = sparsify_random(&w, 0.1, &mut rng).unwrap();
            for (i, &v) in s.data().iter().enumerate() {
                if v == 0.0 {
                    by_row[i / 10] += 1;
                    by_col[i % 10] += 1;
                }
            }
        }
        let chi2 = |counts: &[u64; 10]| {
            let e = 10_000.0;
            counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum::<f64>()
        };
        assert!(chi2(&by_row) < CHI2_9_P01, "rows {by_row:?}");
        assert!(chi2(&by_col) < CHI2_9_P01, "cols {by_col:?}");
    }

    #[test]
    fn empty_and_identity() {
        let x = Rng::new(1).uniform(-1.0, 1.0, 5, 3).unwrap();
        let empty = CsrMatrix::new(4, 5, vec![0; 5], vec![], vec![]).unwrap();
        assert_eq!(spmm_csr(&empty, &x).unwrap(), Matrix::zeros(4, 3));
        let id = CsrMatrix::from_dense(&Matrix::identity(5));
        assert_eq!(id.nnz(), 5);
        assert_eq!(spmm_csr(&id, &x).unwrap(), x);
    }

    #[test]
    fn matches_dense_product() {
        let mut rng = Rng::new(2);
        let w = rng.uniform(-1.0, 1.0, 32, 32).unwrap();
        let ws = sparsify_random(&w, 0.9, &mut rng).unwrap();
        let x = rng.uniform(-1.0, 1.0, 32, 7).unwrap();
        let csr = CsrMatrix::from_dense(&ws);
        assert_eq!(csr.nnz(), 32 * 32 - 922);
        assert_eq!(csr.to_dense(), ws);
        let dense = gemm(&ws, &x).unwrap();
        for threads in [1, 3] {
            let sp = spmm_csr_threaded(&csr, &x, threads).unwrap();
            assert!(sp.max_abs_diff(&dense).unwrap() <= 1e-5 * dense.max_abs().max(1.0));
        }
    }

    #[test]
    fn malformed_csr_is_a_format_error() {
        let x = Matrix::zeros(3, 2);
        let bad = [
            CsrMatrix { rows: 2, cols: 3, row_ptr: vec![0, 1], col_idx: vec![0], values: vec![1.0] },
            CsrMatrix { rows: 2, cols: 3, row_ptr: vec![0, 2, 1], col_idx: vec![0, 1], values: vec![1.0, 1.0] },
            CsrMatrix { rows: 2, cols: 3, row_ptr: vec![0, 1, 2], col_idx: vec![0, 3], values: vec![1.0, 1.0] },
            CsrMatrix { rows: 2, cols: 3, row_ptr: vec![0, 1, 2], col_idx: vec![0, 1], values: vec![1.0] },
        ];
        for m in bad {
            assert!(matches!(spmm_csr(&m, &x), Err(Error::Format(_))), "{m:?}");
        }
        let ok = CsrMatrix::new(2, 3, vec![0, 1, 1], vec![2], vec![4.0]).unwrap();
        assert!(matches!(spmm_csr(&ok, &Matrix::zeros(2, 2)), Err(Error::Shape(_))));
    }
}
