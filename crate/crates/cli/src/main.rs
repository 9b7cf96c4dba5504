//! `iss`: train, analyze, compact, benchmark and evaluate ISS-regularized
//! recurrent language models.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use iss_core::bench::{default_cases, run_bench, BenchCase};
use iss_core::compaction::{apply_compaction, plan_compaction, verify_equivalence};
use iss_core::io::{
    load_model_file, save_model_file, write_bench_csv, write_group_norms_csv, write_histogram_csv,
    write_metrics_csv, write_sparsity_csv, write_tensor_counts_csv, ThresholdRecord,
};
use iss_core::iss::detect_zero_groups;
use iss_core::numerics::set_gemm_threads;
use iss_core::rnn::{check_lstm_toy, check_rhn_toy};
use iss_core::train::{
    build_model, calibrate_tau, fingerprint_bytes, fingerprint_json, perplexity, threshold_weights,
    train_with_callback, Corpus, ExperimentConfig, RegMode,
};
use iss_core::{LanguageModel, Model, OverlapPolicy, Rng, TensorStore, BUNDLED_CORPUS};

#[derive(Parser)]
#[command(name = "iss", version, about = "Intrinsic sparse structure learning for LSTMs and RHNs")]
struct Cli {
    /// Threads for matrix products and benchmarks.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a language model with group-Lasso, ℓ1 or no regularization.
    Train(TrainArgs),
    /// Report zero ISS groups and group-norm statistics as CSV.
    Analyze(AnalyzeArgs),
    /// Remove zero ISS components and check the smaller model is equivalent.
    Compact(CompactArgs),
    /// Dense GEMM against CSR and structurally shrunk GEMM.
    Bench(BenchArgs),
    /// Perplexity of a saved model.
    Eval(EvalArgs),
    /// Finite-difference check of the LSTM and RHN gradients.
    Gradcheck(GradcheckArgs),
    /// Pick the largest threshold that keeps perplexity within a tolerance.
    CalibrateTau(CalibrateArgs),
    /// Write the ISS group map of a model as JSON.
    ExportGroups(ExportArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Plain-text corpus; the bundled one when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Trailing fraction of the text held out for validation.
    #[arg(long, default_value_t = 0.1)]
    valid_fraction: f64,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        let text = match &self.corpus {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => BUNDLED_CORPUS.to_string(),
        };
        Ok(Corpus::from_text(&text, self.valid_fraction)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// group_lasso, l1 or none.
    #[arg(long)]
    reg: Option<RegMode>,
    /// distinct or per_slice.
    #[arg(long)]
    policy: Option<OverlapPolicy>,
    /// First epoch with the regularizer on.
    #[arg(long)]
    sparsify_from: Option<usize>,
    /// Last epoch with the regularizer on; later zero groups stay frozen.
    #[arg(long)]
    sparsify_until: Option<usize>,
    #[command(flatten)]
    data: CorpusArgs,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Largest magnitude still counted as zero.
    #[arg(long, default_value_t = 0.0)]
    zero_tol: f64,
    #[arg(long, default_value = "distinct")]
    policy: OverlapPolicy,
    /// Directory for sparsity.csv, tensors.csv, group_norms.csv and histogram.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompactArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Compaction plan JSON.
    #[arg(long)]
    plan: PathBuf,
    /// Equivalence report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Zero every group-member weight below this magnitude first.
    #[arg(long)]
    threshold: Option<f64>,
    /// Treat groups whose weights are all at most this large as zero.
    #[arg(long)]
    zero_tol: Option<f64>,
    #[arg(long, default_value = "distinct")]
    policy: OverlapPolicy,
}

#[derive(Args)]
struct BenchArgs {
    /// Hidden sizes (input size is the same).
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024])]
    hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 32])]
    batch: Vec<usize>,
    /// Removal fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 0.8, 0.9, 0.95])]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Hidden and input size 1500, batch 10.
    #[arg(long)]
    full_size: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: CorpusArgs,
    #[arg(long, value_enum, default_value_t = Split::Valid)]
    split: Split,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Lstm,
    Rhn,
    Both,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Family::Both)]
    kind: Family,
    /// Random LSTM configurations.
    #[arg(long, default_value_t = 20)]
    lstm_configs: usize,
    /// Random RHN configurations.
    #[arg(long, default_value_t = 10)]
    rhn_configs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2])]
    grid: Vec<f64>,
    /// Allowed relative perplexity increase.
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    #[arg(long, default_value = "distinct")]
    policy: OverlapPolicy,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Write the model thresholded at the chosen τ here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Saved model whose topology to use.
    #[arg(long, conflicts_with = "config")]
    model: Option<PathBuf>,
    /// Experiment config whose model to use, with the bundled vocabulary.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "distinct")]
    policy: OverlapPolicy,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let r = &mut cfg.reg;
    r.lambda = a.lambda.unwrap_or(r.lambda);
    r.tau = a.tau.unwrap_or(r.tau);
    r.epsilon = a.epsilon.unwrap_or(r.epsilon);
    r.mode = a.reg.unwrap_or(r.mode);
    r.policy = a.policy.unwrap_or(r.policy);
    r.sparsify_from = a.sparsify_from.unwrap_or(r.sparsify_from);
    r.sparsify_until = a.sparsify_until.or(r.sparsify_until);
    let t = &mut cfg.train;
    t.seed = a.seed.unwrap_or(t.seed);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    cfg.validate()?;
    let fingerprint = cfg.fingerprint();
    eprintln!("config {fingerprint}");

    let corpus = a.data.load()?;
    let model = build_model(&cfg.model, corpus.vocab_size(), cfg.train.seed)?;
    let map = model.group_map(cfg.reg.policy)?;
    let out = train_with_callback(model, &corpus, &cfg.train, &cfg.reg, &map, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.4}  train ppl {:.3}  valid ppl {:.3}  zero groups {:?}",
            e.epoch, e.learning_rate, e.train_ppl, e.valid_ppl, e.zero_groups
        );
    })?;
    let record = (cfg.reg.tau > 0.0).then_some(ThresholdRecord { tau: cfg.reg.tau });
    save_model_file(&out.model, record, &a.out)?;
    if let Some(p) = &a.metrics {
        write_metrics_csv(create(p)?, &out.metrics.epochs, &fingerprint)?;
    }
    if let Some(msg) = out.metrics.diverged {
        bail!("training diverged ({msg}); saved the last model that finished an epoch");
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let bytes = std::fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model = iss_core::io::decode_model(&bytes)?.model;
    let map = model.group_map(a.policy)?;
    let report = detect_zero_groups(&model, &map, a.zero_tol)?;
    let fingerprint = fingerprint_json(&json!({
        "command": "analyze",
        "model": fingerprint_bytes(&bytes),
        "zero_tol": a.zero_tol,
        "policy": a.policy.as_str(),
    }));
    for l in &report.layers {
        println!("{:<12} {:>5} of {:>5} components zero", l.name, l.zero, l.total);
    }
    let before: usize = report.tensors.iter().map(|t| t.before).sum();
    let after: usize = report.tensors.iter().map(|t| t.after).sum();
    println!("grouped parameters {before} -> {after}");
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        write_sparsity_csv(create(&dir.join("sparsity.csv"))?, &report, &fingerprint)?;
        write_tensor_counts_csv(create(&dir.join("tensors.csv"))?, &report, &fingerprint)?;
        write_group_norms_csv(create(&dir.join("group_norms.csv"))?, &report, &fingerprint)?;
        write_histogram_csv(create(&dir.join("histogram.csv"))?, &report, &fingerprint)?;
    }
    Ok(())
}

fn probes(vocab: usize) -> Vec<Vec<Vec<usize>>> {
    let mut rng = Rng::new(0);
    (0..4).map(|_| (0..32).map(|_| (0..3).map(|_| rng.below(vocab)).collect()).collect()).collect()
}

fn compact(a: CompactArgs) -> Result<()> {
    let file = load_model_file(&a.model)?;
    let mut model = file.model;
    let map = model.group_map(a.policy)?;
    let record = match (a.threshold, file.threshold, a.zero_tol) {
        (Some(tau), _, _) => {
            threshold_weights(&mut model, &map, tau)?;
            Some(ThresholdRecord { tau })
        }
        (None, Some(r), _) => Some(r),
        (None, None, Some(_)) => None,
        (None, None, None) => bail!(
            "{} has no threshold record, so its zero groups may not be exact; pass --threshold or --zero-tol",
            a.model.display()
        ),
    };
    let report = detect_zero_groups(&model, &map, a.zero_tol.unwrap_or(0.0))?;
    let plan = plan_compaction(&model, &map, &report)?;
    let small: Model = apply_compaction(&model, &plan)?;
    let eq = verify_equivalence(&model, &small, &plan, &probes(model.vocab_size()))?;
    println!("kept components {:?}", plan.kept_sizes());
    println!("parameters {} -> {}", model.param_count(), small.param_count());
    println!("max output difference {:e}", eq.max_diff());
    save_model_file(&small, record, &a.out)?;
    std::fs::write(&a.plan, plan.to_json()?)?;
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&eq)?)?;
    }
    Ok(())
}

fn bench(a: BenchArgs, threads: usize) -> Result<()> {
    let mut cases = if a.full_size {
        a.levels.iter().map(|&s| BenchCase::new(1500, 1500, 10, s)).collect()
    } else if a.hidden == [256, 512, 1024] && a.batch == [10, 32] {
        default_cases(&a.levels)
    } else {
        let mut v = Vec::new();
        for &h in &a.hidden {
            for &b in &a.batch {
                v.extend(a.levels.iter().map(|&s| BenchCase::new(h, h, b, s)));
            }
        }
        v
    };
    for c in &mut cases {
        c.repetitions = a.repetitions;
        c.warmup = a.warmup;
        c.threads = threads;
    }
    let fingerprint = fingerprint_json(&serde_json::to_value(&cases)?);
    let report = run_bench(&cases)?;
    println!("{:>10} {:>5} {:>5} {:>6} {:>10} {:>10} {:>10} {:>8} {:>8}", "shape", "batch", "s", "k", "dense ms", "csr ms", "struct ms", "csr x", "struct x");
    for r in &report.results {
        println!(
            "{:>10} {:>5} {:>5.2} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>8.2} {:>8.2}",
            format!("{}x{}", r.rows, r.cols),
            r.batch,
            r.sparsity,
            r.k,
            r.dense_ms,
            r.csr_ms,
            r.structured_ms,
            r.csr_speedup,
            r.structured_speedup
        );
    }
    if let Some(p) = &a.out {
        write_bench_csv(create(p)?, &report, &fingerprint)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model_file(&a.model)?.model;
    let corpus = a.data.load()?;
    if corpus.vocab_size() != model.vocab_size() {
        bail!("model vocabulary {} differs from corpus vocabulary {}", model.vocab_size(), corpus.vocab_size());
    }
    let tokens = match a.split {
        Split::Train => &corpus.train,
        Split::Valid => &corpus.valid,
    };
    println!("perplexity {:.9}", perplexity(&model, tokens, a.batch)?);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    const EPS: f64 = 1e-6;
    let mut rng = Rng::new(a.seed);
    let mut worst = 0.0f64;
    let mut failed = 0;
    let mut record = |what: String, rel: f64, passed: bool| {
        println!("{what:<48} max rel error {rel:.3e} {}", if passed { "ok" } else { "FAIL" });
        worst = worst.max(rel);
        failed += usize::from(!passed);
    };
    if matches!(a.kind, Family::Lstm | Family::Both) {
        for i in 0..a.lstm_configs {
            let input = 1 + rng.below(6);
            let hidden: Vec<usize> = (0..1 + rng.below(2)).map(|_| 1 + rng.below(8)).collect();
            let (steps, batch) = (1 + rng.below(6), 1 + rng.below(3));
            let r = check_lstm_toy(a.seed * 1000 + i as u64, input, &hidden, steps, batch, EPS, a.tol)?;
            record(format!("lstm in={input} hidden={hidden:?} steps={steps} batch={batch}"), r.max_rel_error, r.passed);
        }
    }
    if matches!(a.kind, Family::Rhn | Family::Both) {
        for i in 0..a.rhn_configs {
            let (input, width, depth) = (1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(3));
            let coupled = rng.below(2) == 1;
            let (steps, batch) = (1 + rng.below(6), 1 + rng.below(3));
            let r = check_rhn_toy(a.seed * 1000 + 500 + i as u64, input, width, depth, coupled, steps, batch, EPS, a.tol)?;
            record(
                format!("rhn in={input} width={width} depth={depth} coupled={coupled} steps={steps}"),
                r.max_rel_error,
                r.passed,
            );
        }
    }
    println!("worst relative error {worst:.3e}");
    if failed > 0 {
        bail!("{failed} configurations exceeded the tolerance {}", a.tol);
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let file = load_model_file(&a.model)?;
    let corpus = a.data.load()?;
    let map = file.model.group_map(a.policy)?;
    let c = calibrate_tau(&file.model, &corpus.valid, &a.grid, a.tolerance, &map, a.batch)?;
    println!("unthresholded perplexity {:.6}", c.baseline_ppl);
    for (tau, ppl) in &c.evaluated {
        println!("tau {tau:<10e} perplexity {ppl:.6}");
    }
    if c.warning {
        eprintln!("warning: no τ in the grid stays within the tolerance; using the smallest");
    }
    println!("chosen tau {:e}", c.tau);
    if let Some(out) = &a.out {
        let mut m = file.model;
        threshold_weights(&mut m, &map, c.tau)?;
        save_model_file(&m, Some(ThresholdRecord { tau: c.tau }), out)?;
    }
    Ok(())
}

fn export_groups(a: ExportArgs) -> Result<()> {
    let model = match (&a.model, &a.config) {
        (Some(p), _) => load_model_file(p)?.model,
        (None, Some(p)) => {
            let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(p)?)?;
            let vocab = Corpus::from_text(BUNDLED_CORPUS, 0.1)?.vocab_size();
            build_model(&cfg.model, vocab, cfg.train.seed)?
        }
        (None, None) => bail!("pass --model or --config"),
    };
    let doc = model.group_map(a.policy)?.to_json_doc();
    std::fs::write(&a.out, serde_json::to_string_pretty(&doc)?)?;
    println!("{} groups written to {}", doc.groups.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    set_gemm_threads(cli.threads);
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Compact(a) => compact(a),
        Command::Bench(a) => bench(a, cli.threads),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::CalibrateTau(a) => calibrate(a),
        Command::ExportGroups(a) => export_groups(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
