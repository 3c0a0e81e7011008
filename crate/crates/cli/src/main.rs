use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use selsync::data::{generate_blobs, write_csv, Split};
use selsync::harness::{compare_runs, read_jsonl, replay_trace, run_experiment, ExperimentConfig, RunOptions, RunSummary};
use selsync::seed;
use selsync::signal::DEFAULT_WARMUP;

#[derive(Parser)]
#[command(name = "selsync", version, about = "Selective synchronization for data-parallel SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.jsonl, eval.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `runs/<config file stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a Gaussian-blob train/test pair as CSV with JSON sidecars.
    GenerateData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 2000)]
        per_class: usize,
        #[arg(long, default_value_t = 400)]
        test_per_class: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data/train.csv")]
        train: PathBuf,
        #[arg(long, default_value = "data/test.csv")]
        test: PathBuf,
    },
    /// Replay a recorded trace through the threshold rule for several deltas.
    ReplayTrace {
        #[arg(long)]
        trace: PathBuf,
        /// Comma-separated thresholds, e.g. `0,0.1,0.25,0.5`.
        #[arg(long, value_delimiter = ',', required = true)]
        deltas: Vec<f64>,
        /// Forced-sync steps at the start of the trace.
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: u64,
    },
    /// Convergence difference and speedup of a candidate run against a baseline.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
    },
}

fn load_summary(path: &PathBuf) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
                PathBuf::from("runs").join(stem)
            });
            let outcome = run_experiment(&cfg, Some(&out), RunOptions::default())?;
            let s = &outcome.summary;
            println!(
                "{}: {} steps, lssr {}, final accuracy {:.4}, {} bytes -> {}",
                s.strategy,
                s.total_steps,
                s.lssr.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                s.final_metric,
                s.total_bytes,
                out.display()
            );
        }
        Command::GenerateData {
            classes,
            per_class,
            test_per_class,
            dim,
            seed: base,
            train,
            test,
        } => {
            for path in [&train, &test] {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
            }
            let train_set = generate_blobs(classes, per_class, dim, base)?;
            let test_set = generate_blobs(classes, test_per_class, dim, seed::derive(base, &[1]))?.with_split(Split::Test);
            write_csv(&train_set, &train)?;
            write_csv(&test_set, &test)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::ReplayTrace { trace, deltas, warmup } => {
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let records = read_jsonl(&text)?;
            let mut sorted = deltas.clone();
            sorted.sort_by(f64::total_cmp);
            let counts = replay_trace(&records, &sorted, warmup)?;
            println!("delta,sync_steps");
            for (d, c) in &counts {
                println!("{d},{c}");
            }
            if counts.windows(2).any(|w| w[1].1 > w[0].1) {
                bail!("sync counts are not monotone in delta");
            }
        }
        Command::Compare { baseline, candidate } => {
            let c = compare_runs(&load_summary(&baseline)?, &load_summary(&candidate)?);
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
