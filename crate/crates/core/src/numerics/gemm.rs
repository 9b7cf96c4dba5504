//! Dense matrix products.
//!
//! Every output element is produced by a single accumulator that starts at
//! zero and adds `a[i][p] * b[p][j]` for `p` in ascending order. Blocking only
//! reorders *which* elements are computed when, never the summation inside one
//! element, so results are independent of tile edges and of the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::matrix::{Mat, Real};
use crate::error::{shape_err, Result};

static DEFAULT_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Thread count [`gemm`] uses from now on, process-wide.
pub fn set_gemm_threads(threads: usize) {
    DEFAULT_THREADS.store(threads.max(1), Ordering::Relaxed);
}

pub fn gemm_threads() -> usize {
    DEFAULT_THREADS.load(Ordering::Relaxed)
}

/// Row tile height; also the unit of work handed to threads.
pub const BLOCK: usize = 64;

const MR: usize = 4;
const NR: usize = 8;

/// `a · b` with the process-wide thread count (1 unless
/// [`set_gemm_threads`] changed it).
pub fn gemm<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    gemm_threaded(a, b, gemm_threads())
}

/// `a · b`, splitting row tiles over `threads` scoped threads.
pub fn gemm_threaded<T: Real>(a: &Mat<T>, b: &Mat<T>, threads: usize) -> Result<Mat<T>> {
    if a.cols() != b.rows() {
        return shape_err(format!(
            "gemm: {}x{} · {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Mat::zeros(m, n);
    let threads = threads.max(1);
    if threads == 1 || m <= BLOCK {
        kernel(a.data(), b.data(), c.data_mut(), 0, m, k, n);
        return Ok(c);
    }
    let tiles = m.div_ceil(BLOCK);
    let rows_per = tiles.div_ceil(threads) * BLOCK;
    let (ad, bd) = (a.data(), b.data());
    std::thread::scope(|s| {
        for (t, chunk) in c.data_mut().chunks_mut(rows_per * n).enumerate() {
            let rows = chunk.len() / n;
            s.spawn(move || kernel(ad, bd, chunk, t * rows_per, rows, k, n));
        }
    });
    Ok(c)
}

/// Computes `rows` output rows starting at global row `row0`. Columns are
/// handled in `NR`-wide panels of `b`, copied and zero-padded so every tile
/// runs the same fixed-width loop.
fn kernel<T: Real>(a: &[T], b: &[T], c: &mut [T], row0: usize, rows: usize, k: usize, n: usize) {
    let mut panel = vec![T::zero(); k * NR];
    let mut j0 = 0;
    while j0 < n {
        let w = NR.min(n - j0);
        for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
            dst[..w].copy_from_slice(&b[p * n + j0..p * n + j0 + w]);
            dst[w..].fill(T::zero());
        }
        let mut i = 0;
        while i + MR <= rows {
            let arows: [&[T]; MR] = std::array::from_fn(|r| &a[(row0 + i + r) * k..(row0 + i + r + 1) * k]);
            let acc = micro(arows, &panel);
            for (r, acc) in acc.iter().enumerate() {
                c[(i + r) * n + j0..(i + r) * n + j0 + w].copy_from_slice(&acc[..w]);
            }
            i += MR;
        }
        for i in i..rows {
            let [acc] = micro([&a[(row0 + i) * k..(row0 + i + 1) * k]], &panel);
            c[i * n + j0..i * n + j0 + w].copy_from_slice(&acc[..w]);
        }
        j0 += w;
    }
}

#[inline(always)]
fn micro<T: Real, const R: usize>(arows: [&[T]; R], panel: &[T]) -> [[T; NR]; R] {
    let mut acc = [[T::zero(); NR]; R];
    for (p, brow) in panel.chunks_exact(NR).enumerate() {
        let brow: &[T; NR] = brow.try_into().unwrap();
        for r in 0..R {
            let av = arows[r][p];
            for j in 0..NR {
                acc[r][j] = acc[r][j] + av * brow[j];
            }
        }
    }
    acc
}

/// `c += aᵀ · b` where `a` is `p x m` and `b` is `p x n`.
pub fn gemm_tn_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) -> Result<()> {
    if a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols() {
        return shape_err(format!(
            "gemm_tn: ({}x{})ᵀ · {}x{} into {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            c.rows(),
            c.cols()
        ));
    }
    for p in 0..a.rows() {
        let brow = b.row(p);
        for (i, &av) in a.row(p).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in c.row_mut(i).iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    Ok(())
}

/// `a · bᵀ` where `a` is `m x k` and `b` is `n x k`.
pub fn gemm_nt<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols() != b.cols() {
        return shape_err(format!(
            "gemm_nt: {}x{} · ({}x{})ᵀ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    let mut c = Mat::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(b.row(j)) {
                acc = acc + x * y;
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Matrix64, Rng};

    fn naive(a: &Matrix64, b: &Matrix64) -> Matrix64 {
        let mut c = Matrix64::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn hand_multiplication() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = gemm(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_and_zero() {
        let mut rng = Rng::new(3);
        let b = rng.uniform(-1.0, 1.0, 3, 5).unwrap();
        assert_eq!(gemm(&Matrix::identity(3), &b).unwrap(), b);
        let z = gemm(&Matrix::zeros(4, 3), &b).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_error() {
        assert!(gemm(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).is_err());
        assert!(gemm_nt(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn matches_naive_on_ragged_tiles() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 17), (67, 33, 35), (130, 9, 16), (4, 200, 3)] {
            let a = rng.uniform(-1.0, 1.0, m, k).unwrap().cast::<f64>();
            let b = rng.uniform(-1.0, 1.0, k, n).unwrap().cast::<f64>();
            let want = naive(&a, &b);
            for threads in [1, 2, 3] {
                let got = gemm_threaded(&a, &b, threads).unwrap();
                // same summation order as the naive loop, so exact
                assert_eq!(got, want, "m={m} k={k} n={n} threads={threads}");
            }
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = Rng::new(5);
        let a = rng.uniform(-1.0, 1.0, 6, 4).unwrap().cast::<f64>();
        let b = rng.uniform(-1.0, 1.0, 6, 3).unwrap().cast::<f64>();
        let mut c = Matrix64::zeros(4, 3);
        gemm_tn_acc(&a, &b, &mut c).unwrap();
        let want = naive(&a.transpose(), &b);
        assert!(c.max_abs_diff(&want).unwrap() < 1e-12);

        let d = rng.uniform(-1.0, 1.0, 5, 4).unwrap().cast::<f64>();
        let got = gemm_nt(&a.transpose().transpose(), &d).unwrap();
        let want = naive(&a, &d.transpose());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}
