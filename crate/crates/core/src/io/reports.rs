//! CSV reports. Every row carries the fingerprint of the configuration that
//! produced it.

use std::io::Write;

use serde::Serialize;

use crate::bench::BenchReport;
use crate::error::{Error, Result};
use crate::iss::SparsityReport;
use crate::train::EpochMetrics;

fn write_rows<W: Write, R: Serialize>(out: W, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

const METRICS_HEADER: &[&str] = &["epoch", "learning_rate", "train_nll", "train_ppl", "valid_nll", "valid_ppl", "penalty", "zero_groups", "thresholded", "fingerprint"];

#[derive(Serialize)]
struct MetricsRow<'a> {
    epoch: usize,
    learning_rate: f64,
    train_nll: f64,
    train_ppl: f64,
    valid_nll: f64,
    valid_ppl: f64,
    penalty: f64,
    zero_groups: String,
    thresholded: usize,
    fingerprint: &'a str,
}

pub fn write_metrics_csv<W: Write>(out: W, epochs: &[EpochMetrics], fingerprint: &str) -> Result<()> {
    write_rows(
        out,
        METRICS_HEADER,
        epochs.iter().map(|e| MetricsRow {
            epoch: e.epoch,
            learning_rate: e.learning_rate,
            train_nll: e.train_nll,
            train_ppl: e.train_ppl,
            valid_nll: e.valid_nll,
            valid_ppl: e.valid_ppl,
            penalty: e.penalty,
            zero_groups: join(&e.zero_groups),
            thresholded: e.thresholded,
            fingerprint,
        }),
    )
}

const SPARSITY_HEADER: &[&str] = &["layer", "name", "total", "zero", "surviving", "zero_components", "policy", "zero_tol", "fingerprint"];

#[derive(Serialize)]
struct LayerRow<'a> {
    layer: usize,
    name: &'a str,
    total: usize,
    zero: usize,
    surviving: usize,
    zero_components: String,
    policy: &'a str,
    zero_tol: f64,
    fingerprint: &'a str,
}

/// One row per layer.
pub fn write_sparsity_csv<W: Write>(out: W, report: &SparsityReport, fingerprint: &str) -> Result<()> {
    write_rows(
        out,
        SPARSITY_HEADER,
        report.layers.iter().enumerate().map(|(layer, l)| LayerRow {
            layer,
            name: &l.name,
            total: l.total,
            zero: l.zero,
            surviving: l.surviving,
            zero_components: join(&l.zero_components),
            policy: report.policy.as_str(),
            zero_tol: report.zero_tol,
            fingerprint,
        }),
    )
}

const TENSORS_HEADER: &[&str] = &["tensor", "params_before", "params_after", "fingerprint"];

#[derive(Serialize)]
struct TensorRow<'a> {
    tensor: &'a str,
    params_before: usize,
    params_after: usize,
    fingerprint: &'a str,
}

/// Parameter counts per weight tensor before and after removing the zero
/// groups.
pub fn write_tensor_counts_csv<W: Write>(out: W, report: &SparsityReport, fingerprint: &str) -> Result<()> {
    write_rows(
        out,
        TENSORS_HEADER,
        report.tensors.iter().map(|t| TensorRow {
            tensor: &t.name,
            params_before: t.before,
            params_after: t.after,
            fingerprint,
        }),
    )
}

const NORMS_HEADER: &[&str] = &["layer", "component", "norm", "fingerprint"];

#[derive(Serialize)]
struct NormRow<'a> {
    layer: usize,
    component: usize,
    norm: f64,
    fingerprint: &'a str,
}

pub fn write_group_norms_csv<W: Write>(out: W, report: &SparsityReport, fingerprint: &str) -> Result<()> {
    write_rows(
        out,
        NORMS_HEADER,
        report.norms.iter().enumerate().flat_map(|(layer, ns)| {
            ns.iter().enumerate().map(move |(component, &norm)| NormRow { layer, component, norm, fingerprint })
        }),
    )
}

const HISTOGRAM_HEADER: &[&str] = &["bin_lo", "bin_hi", "count", "fingerprint"];

#[derive(Serialize)]
struct BinRow<'a> {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    fingerprint: &'a str,
}

/// The group-norm histogram, one row per bin.
pub fn write_histogram_csv<W: Write>(out: W, report: &SparsityReport, fingerprint: &str) -> Result<()> {
    let h = &report.histogram;
    write_rows(
        out,
        HISTOGRAM_HEADER,
        h.counts.iter().enumerate().map(|(i, &count)| BinRow {
            bin_lo: h.edges[i],
            bin_hi: h.edges[i + 1],
            count,
            fingerprint,
        }),
    )
}

const BENCH_HEADER: &[&str] = &["case_id", "shape", "batch", "s", "k", "csr_fraction", "structured_fraction", "dense_ms", "csr_ms", "structured_ms", "csr_speedup", "structured_speedup", "fingerprint"];

#[derive(Serialize)]
struct BenchRow<'a> {
    case_id: usize,
    shape: String,
    batch: usize,
    s: f64,
    k: usize,
    csr_fraction: f64,
    structured_fraction: f64,
    dense_ms: f64,
    csr_ms: f64,
    structured_ms: f64,
    csr_speedup: f64,
    structured_speedup: f64,
    fingerprint: &'a str,
}

pub fn write_bench_csv<W: Write>(out: W, report: &BenchReport, fingerprint: &str) -> Result<()> {
    write_rows(
        out,
        BENCH_HEADER,
        report.results.iter().map(|r| BenchRow {
            case_id: r.case_id,
            shape: format!("{}x{}", r.rows, r.cols),
            batch: r.batch,
            s: r.sparsity,
            k: r.k,
            csr_fraction: r.csr_fraction,
            structured_fraction: r.structured_fraction,
            dense_ms: r.dense_ms,
            csr_ms: r.csr_ms,
            structured_ms: r.structured_ms,
            csr_speedup: r.csr_speedup,
            structured_speedup: r.structured_speedup,
            fingerprint,
        }),
    )
}
