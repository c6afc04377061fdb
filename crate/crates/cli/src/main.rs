use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mmtprobe::evaluation::{load_labels, noise_statistics};
use mmtprobe::experiment::render_manifests;
use mmtprobe::gradcheck::component_gradient_checks;
use mmtprobe::{evaluate_checkpoint, parse_config, run_experiment, Condition, Precision, RunManifest, SplitName};

#[derive(Parser)]
#[command(name = "mmtprobe", version, about = "Retrieval-augmented multimodal translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed, decode the test split and write a run directory.
    Train {
        /// TOML experiment config.
        config: PathBuf,
        /// Dotted override such as `train.lr=0.01` (repeatable, applied in order).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        condition: Option<Condition>,
        /// Run directory, relative to the working directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Re-decode a split with a stored checkpoint and print its BLEU.
    Evaluate {
        /// Run directory (or its manifest.json).
        run: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Noise statistics over a JSONL file of manual labels.
    Stats { labels: PathBuf },
    /// Finite-difference gradient checks on tiny float64 shapes.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Render a comparison table from finished runs.
    Table {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision `{other}` (f32 or f64)")),
    }
}

fn train(
    config: PathBuf,
    mut overrides: Vec<String>,
    condition: Option<Condition>,
    output_dir: Option<PathBuf>,
    precision: Option<Precision>,
    seeds: Vec<u64>,
) -> Result<()> {
    if let Some(c) = condition {
        overrides.push(format!("condition=\"{c}\""));
    }
    if let Some(p) = precision {
        let p = if p == Precision::F32 { "f32" } else { "f64" };
        overrides.push(format!("precision=\"{p}\""));
    }
    if !seeds.is_empty() {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("train.seeds=[{}]", list.join(",")));
    }
    let mut cfg = parse_config(&config, &overrides)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let manifest = run_experiment(&cfg)?;
    for s in &manifest.seeds {
        eprintln!(
            "seed {}: best epoch {}, dev BLEU {:.2}, {} BLEU {:.2}",
            s.seed,
            s.best_epoch,
            s.best_dev_bleu * 100.0,
            manifest.evaluated_on,
            s.bleu.score * 100.0
        );
    }
    print!("{}", render_manifests(std::slice::from_ref(&manifest)));
    eprintln!("run written to {}", cfg.output_dir.display());
    Ok(())
}

fn evaluate(run: PathBuf, seed: Option<u64>, split: SplitName) -> Result<()> {
    let manifest = RunManifest::load(&run)?;
    let dir = if run.is_dir() {
        run
    } else {
        run.parent().map(PathBuf::from).unwrap_or_default()
    };
    let seed = match seed {
        Some(s) => s,
        None => manifest.seeds.first().context("manifest has no seeds")?.seed,
    };
    let report = evaluate_checkpoint(&manifest, &dir, seed, split)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn stats(labels: PathBuf) -> Result<()> {
    let records = load_labels(&labels).context("labels")?;
    let s = noise_statistics(&records)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn gradcheck(seed: u64, tolerance: f64) -> Result<()> {
    let checks = component_gradient_checks(seed).context("gradcheck")?;
    let mut failed = Vec::new();
    println!("{:<24} {:>12}  worst parameter", "component", "max rel err");
    for c in &checks {
        let err = c.report.max_relative_error();
        let worst = c.report.worst().map(|w| w.name.as_str()).unwrap_or("-");
        println!("{:<24} {:>12.3e}  {worst}", c.component, err);
        if err >= tolerance {
            failed.push(c.component.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradcheck: {} above {tolerance:e}", failed.join(", "));
    }
    Ok(())
}

fn table(runs: Vec<PathBuf>) -> Result<()> {
    let manifests = runs
        .iter()
        .map(|r| RunManifest::load(r).with_context(|| format!("table: {}", r.display())))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", render_manifests(&manifests));
    Ok(())
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            overrides,
            condition,
            output_dir,
            precision,
            seeds,
        } => train(config, overrides, condition, output_dir, precision, seeds),
        Command::Evaluate { run, seed, split } => evaluate(run, seed, split),
        Command::Stats { labels } => stats(labels),
        Command::Gradcheck { seed, tolerance } => gradcheck(seed, tolerance),
        Command::Table { runs } => table(runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
