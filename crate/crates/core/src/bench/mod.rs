//! Dense GEMM against CSR SpMM against structurally shrunk dense GEMM at
//! matched parameter-removal fractions.

mod csr;

pub use csr::{sparsify_random, spmm_csr, spmm_csr_threaded, CsrMatrix};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm_threaded, Matrix, Rng};

/// Relative tolerance all three products must meet before timing.
pub const AGREEMENT_TOL: f64 = 1e-5;

/// One LSTM-shaped product `W · X`, `W` being `[4h × (in+h)]` and `X`
/// `[(in+h) × batch]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub hidden: usize,
    pub input: usize,
    pub batch: usize,
    pub sparsity: f64,
    pub repetitions: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Rows of `W` removed per structured component.
    pub rows_per_component: usize,
    /// Columns of `W` removed per structured component.
    pub cols_per_component: usize,
    pub seed: u64,
}

impl BenchCase {
    pub fn new(hidden: usize, input: usize, batch: usize, sparsity: f64) -> Self {
        Self {
            hidden,
            input,
            batch,
            sparsity,
            repetitions: 10,
            warmup: 3,
            threads: 1,
            rows_per_component: 4,
            cols_per_component: 2,
            seed: 1,
        }
    }

    pub fn rows(&self) -> usize {
        4 * self.hidden
    }

    pub fn cols(&self) -> usize {
        self.input + self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.input == 0 || self.batch == 0 {
            return Err(Error::Parameter("bench shapes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Parameter(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        if self.repetitions < 10 || self.warmup < 3 {
            return Err(Error::Parameter("need at least 10 repetitions and 3 warmup runs".into()));
        }
        if self.rows_per_component == 0 || self.cols_per_component == 0 {
            return Err(Error::Parameter("removal ratio entries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shrink {
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    pub fraction: f64,
}

/// Shapes of `W` after removing `k` components.
pub fn structured_shrink(case: &BenchCase, k: usize) -> Result<Shrink> {
    let (r, c) = (case.rows(), case.cols());
    let (dr, dc) = (case.rows_per_component * k, case.cols_per_component * k);
    if dr >= r || dc >= c {
        return Err(Error::Parameter(format!("removing {k} components empties the {r}x{c} matrix")));
    }
    let (rows, cols) = (r - dr, c - dc);
    let fraction = 1.0 - (rows * cols) as f64 / (r * c) as f64;
    Ok(Shrink { k, rows, cols, fraction })
}

/// Smallest `k` whose removal fraction reaches `target`.
pub fn structured_shrink_for(case: &BenchCase, target: f64) -> Result<Shrink> {
    let mut k = 0;
    loop {
        let s = structured_shrink(case, k).map_err(|_| {
            Error::Parameter(format!("removal fraction {target} is unreachable for a {}x{} matrix", case.rows(), case.cols()))
        })?;
        if s.fraction >= target {
            return Ok(s);
        }
        k += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub case_id: usize,
    pub rows: usize,
    pub cols: usize,
    pub batch: usize,
    pub sparsity: f64,
    pub k: usize,
    pub csr_fraction: f64,
    pub structured_fraction: f64,
    pub dense_ms: f64,
    pub csr_ms: f64,
    pub structured_ms: f64,
    pub csr_speedup: f64,
    pub structured_speedup: f64,
    /// Largest relative disagreement seen in the correctness check.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
}

/// Median wall time in milliseconds of `reps` calls after `warmup` discarded
/// calls.
pub fn median_ms<R>(reps: usize, warmup: usize, mut f: impl FnMut() -> R) -> f64 {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

fn rel_err(a: &Matrix, b: &Matrix) -> Result<f64> {
    let scale = (a.max_abs() as f64).max(f64::MIN_POSITIVE);
    Ok(a.max_abs_diff(b)? as f64 / scale)
}

/// Operands of one case: the dense weights, their random sparsification,
/// the structurally shrunk weights and the two right-hand sides.
pub struct Operands {
    pub dense: Matrix,
    pub sparse: Matrix,
    pub csr: CsrMatrix,
    pub shrunk: Matrix,
    pub x: Matrix,
    pub x_shrunk: Matrix,
    pub shrink: Shrink,
}

impl Operands {
    pub fn generate(case: &BenchCase) -> Result<Self> {
        case.validate()?;
        let mut rng = Rng::new(case.seed);
        let dense = rng.uniform(-1.0, 1.0, case.rows(), case.cols())?;
        let x = rng.uniform(-1.0, 1.0, case.cols(), case.batch)?;
        let sparse = sparsify_random(&dense, case.sparsity, &mut rng)?;
        let csr = CsrMatrix::from_dense(&sparse);
        let shrink = structured_shrink_for(case, case.sparsity)?;
        let kept_rows: Vec<usize> = (0..shrink.rows).collect();
        let kept_cols: Vec<usize> = (0..shrink.cols).collect();
        let shrunk = dense.select(&kept_rows, &kept_cols)?;
        let x_shrunk = x.select(&kept_cols, &(0..case.batch).collect::<Vec<_>>())?;
        Ok(Self { dense, sparse, csr, shrunk, x, x_shrunk, shrink })
    }

    /// Largest relative disagreement between the three products and their
    /// dense references.
    pub fn check(&self, threads: usize) -> Result<f64> {
        let reference = gemm_threaded(&self.sparse, &self.x, threads)?;
        let csr = spmm_csr_threaded(&self.csr, &self.x, threads)?;
        let mut masked = self.dense.clone();
        for r in 0..masked.rows() {
            let row = masked.row_mut(r);
            if r >= self.shrink.rows {
                row.fill(0.0);
            } else {
                row[self.shrink.cols..].fill(0.0);
            }
        }
        let full = gemm_threaded(&masked, &self.x, threads)?;
        let kept: Vec<usize> = (0..self.shrink.rows).collect();
        let full = full.select(&kept, &(0..full.cols()).collect::<Vec<_>>())?;
        let shrunk = gemm_threaded(&self.shrunk, &self.x_shrunk, threads)?;
        Ok(rel_err(&reference, &csr)?.max(rel_err(&full, &shrunk)?))
    }
}

/// Times every case after checking that its three products agree.
pub fn run_bench(cases: &[BenchCase]) -> Result<BenchReport> {
    let mut results = Vec::with_capacity(cases.len());
    for (case_id, case) in cases.iter().enumerate() {
        let ops = Operands::generate(case)?;
        let err = ops.check(case.threads)?;
        if !(err <= AGREEMENT_TOL) {
            return Err(Error::Numeric(format!("case {case_id}: products disagree by {err:e} relative")));
        }
        let t = case.threads;
        let (reps, warm) = (case.repetitions, case.warmup);
        let dense_ms = median_ms(reps, warm, || gemm_threaded(&ops.dense, &ops.x, t));
        let csr_ms = median_ms(reps, warm, || csr::spmm_unchecked(&ops.csr, &ops.x, t));
        let structured_ms = median_ms(reps, warm, || gemm_threaded(&ops.shrunk, &ops.x_shrunk, t));
        results.push(BenchResult {
            case_id,
            rows: case.rows(),
            cols: case.cols(),
            batch: case.batch,
            sparsity: case.sparsity,
            k: ops.shrink.k,
            csr_fraction: 1.0 - ops.csr.nnz() as f64 / ops.dense.len() as f64,
            structured_fraction: ops.shrink.fraction,
            dense_ms,
            csr_ms,
            structured_ms,
            csr_speedup: dense_ms / csr_ms,
            structured_speedup: dense_ms / structured_ms,
            max_rel_err: err,
        });
    }
    Ok(BenchReport { results })
}

/// Scaled-down analogs of the 1500-unit LSTM product: `h = in` in
/// {256, 512, 1024}, batch in {10, 32}, at each of `levels`.
pub fn default_cases(levels: &[f64]) -> Vec<BenchCase> {
    let mut cases = Vec::new();
    for h in [256, 512, 1024] {
        for batch in [10, 32] {
            for &s in levels {
                cases.push(BenchCase::new(h, h, batch, s));
            }
        }
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrink_closed_forms() {
        let c = BenchCase::new(1500, 1500, 10, 0.0);
        assert_eq!(structured_shrink(&c, 0).unwrap().fraction, 0.0);
        let s = structured_shrink(&c, 750).unwrap();
        assert_eq!((s.rows, s.cols), (3000, 1500));
        assert!((s.fraction - 0.75).abs() < 1e-15);
        let small = BenchCase::new(4, 4, 1, 0.0);
        let s = structured_shrink(&small, 3).unwrap();
        assert_eq!((s.rows, s.cols), (4, 2));
        assert!((s.fraction - (1.0 - 8.0 / 128.0)).abs() < 1e-15);
        assert!(structured_shrink(&small, 4).is_err());
    }

    #[test]
    fn smallest_k_reaching_target() {
        let c = BenchCase::new(1500, 1500, 10, 0.0);
        assert_eq!(structured_shrink_for(&c, 0.75).unwrap().k, 750);
        assert_eq!(structured_shrink_for(&c, 0.0).unwrap().k, 0);
        let s = structured_shrink_for(&c, 0.5).unwrap();
        assert!(s.fraction >= 0.5 && structured_shrink(&c, s.k - 1).unwrap().fraction < 0.5);
        let small = BenchCase::new(4, 4, 1, 0.0);
        assert_eq!(structured_shrink_for(&small, 0.9).unwrap().k, 3);
        assert!(matches!(structured_shrink_for(&small, 0.95), Err(Error::Parameter(_))));
    }

    #[test]
    fn default_shapes_match_fractions_within_one_percent() {
        for c in default_cases(&[0.1, 0.5, 0.8, 0.9]) {
            let s = structured_shrink_for(&c, c.sparsity).unwrap();
            assert!(s.fraction - c.sparsity < 0.01, "{c:?} -> {s:?}");
        }
    }

    #[test]
    fn custom_removal_ratio() {
        let mut c = BenchCase::new(8, 8, 1, 0.0);
        c.cols_per_component = 1;
        let s = structured_shrink(&c, 2).unwrap();
        assert_eq!((s.rows, s.cols), (24, 14));
    }

    #[test]
    fn validation() {
        let mut c = BenchCase::new(8, 8, 2, 0.5);
        assert!(c.validate().is_ok());
        c.repetitions = 9;
        assert!(c.validate().is_err());
        let mut c = BenchCase::new(8, 8, 2, 1.0);
        assert!(c.validate().is_err());
        c.sparsity = 0.2;
        c.warmup = 2;
        assert!(run_bench(&[c]).is_err());
    }

    #[test]
    fn small_run_reports_matched_fractions() {
        let cases: Vec<BenchCase> = [0.0, 0.5, 0.9].iter().map(|&s| BenchCase::new(32, 32, 4, s)).collect();
        let rep = run_bench(&cases).unwrap();
        assert_eq!(rep.results.len(), 3);
        for r in &rep.results {
            assert!(r.max_rel_err <= AGREEMENT_TOL);
            assert!((r.csr_fraction - r.sparsity).abs() < 1e-3);
            assert!(r.structured_fraction >= r.sparsity && r.structured_fraction - r.sparsity < 0.07);
            assert!(r.dense_ms > 0.0 && r.csr_ms > 0.0 && r.structured_ms > 0.0);
        }
        assert_eq!(rep.results[0].k, 0);
    }

    #[test]
    fn check_agrees_with_threads() {
        let mut c = BenchCase::new(40, 24, 5, 0.6);
        c.threads = 3;
        let ops = Operands::generate(&c).unwrap();
        assert!(ops.check(3).unwrap() <= AGREEMENT_TOL);
        assert_eq!(ops.shrunk.shape(), (ops.shrink.rows, ops.shrink.cols));
    }
}
