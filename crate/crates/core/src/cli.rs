//! `coffe` command line: `synth`, `train`, `eval` and `export-proj`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::data::{read_embedding_file, synth_dataset, write_embedding_file, EmbeddingDataset, SynthConfig};
use crate::error::{usage_err, Error, Result};
use crate::io::write_atomic;
use crate::models::{read_model, write_model, Arch, ArchConfig};
use crate::train::{evaluate, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "coffe", version, about = "Source attribution over precomputed audio embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate paired synthetic train/test embedding files.
    Synth(SynthArgs),
    /// Train a classifier and write a CFM1 model plus a JSON report.
    Train(TrainArgs),
    /// Evaluate a model on embedding files.
    Eval(EvalArgs),
    /// Export raw embeddings as CSV for external projection tools.
    ExportProj(ExportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long = "per-class", default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "out-prefix")]
    out_prefix: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long = "features-a")]
    features_a: PathBuf,
    #[arg(long = "features-b")]
    features_b: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.3)]
    s: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long = "val-fraction", default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "features-a")]
    features_a: PathBuf,
    #[arg(long = "features-b")]
    features_b: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long = "features-a")]
    features_a: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print one `error: <kind>: <message>` line.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.detail()));
            e.exit_code()
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("COFFE_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportProj(a) => export_proj(&a.features_a, &a.out),
    }
}

fn check_output(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(usage_err!("output directory {} does not exist", parent.display()));
    }
    Ok(())
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(usage_err!("input file {} does not exist", path.display()));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(a.dim, a.per_class, a.spread, a.seed);
    let outputs = ["train.a", "train.b", "test.a", "test.b"].map(|s| PathBuf::from(format!("{}.{s}.emb", a.out_prefix)));
    for p in &outputs {
        check_output(p)?;
    }
    let data = synth_dataset(&cfg)?;
    let sets = [&data.train.a, &data.train.b, &data.test.a, &data.test.b];
    for (ds, path) in sets.into_iter().zip(&outputs) {
        write_embedding_file(ds, path)?;
        info!("wrote {} ({} rows)", path.display(), ds.count());
    }
    Ok(())
}

fn load_views(a: &Path, b: Option<&Path>) -> Result<(EmbeddingDataset, Option<EmbeddingDataset>)> {
    let da = read_embedding_file(a)?;
    let db = b.map(read_embedding_file).transpose()?;
    Ok((da, db))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::new(ArchConfig::new(a.arch, 1, None));
    cfg.epochs = a.epochs;
    cfg.lr = a.lr;
    cfg.batch_size = a.batch;
    cfg.lambda = a.lambda;
    cfg.s = a.s;
    cfg.patience = a.patience;
    cfg.val_fraction = a.val_fraction;
    cfg.dropout_rate = a.dropout;
    cfg.seed = a.seed;
    cfg.validate_hyperparameters()?;
    match (a.arch.is_fusion(), &a.features_b) {
        (true, None) => return Err(usage_err!("--arch {} requires --features-b", a.arch)),
        (false, Some(_)) => return Err(usage_err!("--arch {} does not take --features-b", a.arch)),
        _ => {}
    }
    check_input(&a.features_a)?;
    if let Some(b) = &a.features_b {
        check_input(b)?;
    }
    check_output(&a.out)?;
    if let Some(r) = &a.report {
        check_output(r)?;
    }

    let (da, db) = load_views(&a.features_a, a.features_b.as_deref())?;
    let mut arch = ArchConfig::new(a.arch, da.dim, db.as_ref().map(|d| d.dim));
    arch.n_classes = da.n_classes();
    cfg.arch = arch;
    let (params, report) = train::<f64>(&cfg, &da, db.as_ref())?;
    // Serialize everything before the first write so a failure leaves no output.
    let report_json = serde_json::to_string_pretty(&report)? + "\n";
    write_model(&params, &a.out)?;
    if let Some(r) = &a.report {
        write_atomic(r, report_json.as_bytes())?;
    }
    println!(
        "trained {} ({} parameters): best epoch {}, validation accuracy {:.4}",
        a.arch,
        params.param_count(),
        report.best_epoch,
        report.metrics.accuracy
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    check_input(&a.model)?;
    check_input(&a.features_a)?;
    if let Some(b) = &a.features_b {
        check_input(b)?;
    }
    for p in a.report.iter().chain(&a.confusion) {
        check_output(p)?;
    }
    let params = read_model::<f64>(&a.model)?;
    let (da, db) = load_views(&a.features_a, a.features_b.as_deref())?;
    let metrics = evaluate(&params, &da, db.as_ref())?;
    let json = metrics.to_json()? + "\n";
    let csv = confusion_csv(&metrics.confusion);
    if let Some(r) = &a.report {
        write_atomic(r, json.as_bytes())?;
    }
    if let Some(c) = &a.confusion {
        write_atomic(c, csv.as_bytes())?;
    }
    let eer = metrics.eer_avg.map_or("undefined".to_string(), |e| format!("{e:.4}"));
    println!(
        "accuracy {:.4} macro_f1 {:.4} eer_avg {eer}",
        metrics.accuracy, metrics.macro_f1
    );
    Ok(())
}

/// One line per true class, one column per predicted class.
pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in confusion {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// CSV with header `label,dim_0,…,dim_{D-1}` and one raw row per sample.
pub fn projection_csv(ds: &EmbeddingDataset) -> String {
    let mut out = String::with_capacity(ds.count() * ds.dim * 10);
    out.push_str("label");
    for d in 0..ds.dim {
        let _ = write!(out, ",dim_{d}");
    }
    out.push('\n');
    for i in 0..ds.count() {
        let _ = write!(out, "{}", ds.labels[i]);
        for v in ds.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn export_proj(features: &Path, out_csv: &Path) -> Result<()> {
    check_input(features)?;
    check_output(out_csv)?;
    let ds = read_embedding_file(features)?;
    write_atomic(out_csv, projection_csv(&ds).as_bytes())
}
