use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cod_core::experiments::{run, ExperimentConfig, ExperimentKind, RunSummary};
use cod_core::Error;
use serde_json::json;

/// Counterfactual-infused distillation experiments.
///
/// Settings come from the JSON config, then the flags below override them.
#[derive(Debug, Parser)]
#[command(name = "cod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Teacher vs. standard and counterfactual-infused students on two moons.
    Moons(RunArgs),
    /// Monte-Carlo MLE error with and without boundary samples.
    Fisher(RunArgs),
    /// Measured boundary distance against the alpha + epsilon bound.
    Bound(RunArgs),
    /// Soft-label modes across few-shot budgets.
    Ablation(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run (repeatable, or several after one flag).
    #[arg(long = "seed", num_args = 1..)]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Few-shot budget (the Monte-Carlo sample size for `fisher`).
    #[arg(long)]
    k: Option<usize>,
}

fn build_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = kind;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(k) = args.k {
        match kind {
            ExperimentKind::Fisher => cfg.fisher.experiment.k = k,
            ExperimentKind::Ablation => cfg.ablation.ks = vec![k],
            ExperimentKind::Moons | ExperimentKind::Bound => cfg.data.k = k,
        }
    }
    Ok(cfg)
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::FAILURE
}

fn report(summary: &RunSummary) -> ExitCode {
    let failed: Vec<_> = summary.seeds.iter().filter(|e| e.error.is_some()).collect();
    if failed.len() == summary.seeds.len() {
        let first = failed[0].error.as_ref().unwrap();
        return fail(&first.kind, &format!("every seed failed; seed {}: {}", failed[0].seed, first.message));
    }
    let out = summary.config.output_dir.join("summary.json");
    println!(
        "{}",
        json!({
            "experiment": summary.experiment.name(),
            "summary": out.display().to_string(),
            "seeds": summary.seeds.len(),
            "failed_seeds": failed.iter().map(|e| e.seed).collect::<Vec<_>>(),
        })
    );
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    let (kind, args) = match &cli.command {
        Command::Moons(a) => (ExperimentKind::Moons, a),
        Command::Fisher(a) => (ExperimentKind::Fisher, a),
        Command::Bound(a) => (ExperimentKind::Bound, a),
        Command::Ablation(a) => (ExperimentKind::Ablation, a),
    };
    match build_config(kind, args).and_then(|cfg| run(&cfg)) {
        Ok(summary) => report(&summary),
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
