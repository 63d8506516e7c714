use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use staterate_core::harness::{
    compare_reports, evaluate_checks, generate_dataset, run_scenario, run_training_pipeline, CheckOutcome,
    CompareConfig, DatasetConfig, PipelineConfig, ScenarioConfig, SimulatedTrace,
};
use staterate_core::sync::write_trace;
use staterate_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "staterate", version, about = "UAV rate adaptation simulator and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled traces from a dataset config.
    Simulate(RunArgs),
    /// Generate a dataset and train the prediction and evaluation networks.
    Train(RunArgs),
    /// Replay one scenario across the configured adapters.
    Evaluate(RunArgs),
    /// Average several exported CSV reports.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output location.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Verify the configured thresholds; exit 3 when any fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct CompareArgs {
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    check: bool,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Json(_) | Error::Domain(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn config_error(msg: String) -> Failure {
    Failure { code: EXIT_CONFIG, msg }
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
}

fn check_failed(failures: Vec<String>) -> Result<(), Failure> {
    if failures.is_empty() {
        println!("check: all thresholds met");
        return Ok(());
    }
    for f in &failures {
        eprintln!("check failed: {f}");
    }
    Err(Failure {
        code: EXIT_CHECK,
        msg: format!("{} threshold(s) failed", failures.len()),
    })
}

fn failed_checks(outcomes: &[CheckOutcome]) -> Vec<String> {
    outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| {
            let c = &o.check;
            let got = o.value.map_or("missing".to_string(), |v| format!("{v:.4}"));
            format!("{}/{}/{} = {got} (min {:?}, max {:?})", c.adapter, c.metric, c.bin, c.min, c.max)
        })
        .collect()
}

fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg: DatasetConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .ok_or_else(|| config_error("simulate needs --out <dir>".into()))?;
    let traces = generate_dataset(&cfg)?;
    for (i, t) in traces.iter().enumerate() {
        write_trace(&SimulatedTrace::labeled(t), &out.join(format!("trace_{i:03}")))?;
    }
    let frames: usize = traces.iter().map(SimulatedTrace::len).sum();
    println!("wrote {} traces ({frames} frames) to {}", traces.len(), out.display());
    Ok(())
}

fn train(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg: PipelineConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    if args.out.is_some() {
        cfg.output_dir = args.out.clone();
    }
    let out = run_training_pipeline(&cfg)?;
    let r = &out.report;
    println!(
        "trained on {} frames, validated on {}; prediction accuracy {}, evaluation accuracy {}",
        r.train_frames,
        r.val_frames,
        fmt_opt(r.final_pred_val_accuracy()),
        fmt_opt(r.final_eval_val_accuracy())
    );
    if let Some(p) = &out.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    if args.check {
        check_failed(cfg.checks.failures(r))?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{v:.4}"))
}

fn evaluate(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg: ScenarioConfig = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.out.is_some() {
        cfg.output_path = args.out.clone();
    }
    let report = run_scenario(&cfg, None)?;
    println!("{:<24} {:>10} {:>8} {:>9}", "adapter", "Mbit/s", "vs OPT", "accuracy");
    for a in &report.adapters {
        println!(
            "{:<24} {:>10.3} {:>8.3} {:>9.3}",
            a.name, a.throughput, a.throughput_vs_opt, a.prediction_accuracy
        );
    }
    if let Some(p) = &cfg.output_path {
        println!("report: {}", p.display());
    }
    if args.check {
        let mut failures = report.dominance_violations();
        failures.extend(failed_checks(&evaluate_checks(&report.rows(), &cfg.checks)));
        check_failed(failures)?;
    }
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<(), Failure> {
    let mut cfg: CompareConfig = load(&args.config)?;
    if args.out.is_some() {
        cfg.output_path = args.out.clone();
    }
    let rows = compare_reports(&cfg)?;
    for r in rows.iter().filter(|r| r.metric == "throughput" && r.bin == "all") {
        println!("{:<24} {:>10.4}", r.adapter, r.value);
    }
    if args.check {
        check_failed(failed_checks(&evaluate_checks(&rows, &cfg.checks)))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
