//! `blac`: train, evaluate and sweep barrier-Lyapunov actor-critic agents.
//!
//! Any config key can be overridden from the environment, e.g.
//! `BLAC__AGENT__LR_POLICY=1e-3` or `BLAC__ENV__CAR_FOLLOWING__EPISODE_LEN=200`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blac_core::config::{env_overrides, ExperimentConfig, Override};
use blac_core::experiment::{self, RunSummary};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "blac", version, about = "Safe and stable actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent per seed and write metrics, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, replacing `run.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory, replacing `run.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out a saved policy without learning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Act with the squashed mean instead of sampling.
        #[arg(long)]
        deterministic: bool,
        /// Where to write eval.csv (defaults to the checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of a single config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted key such as `agent.beta`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path, seeds: Option<Vec<u64>>, out: Option<PathBuf>) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut overrides = env_overrides(std::env::vars())?;
    if let Some(seeds) = seeds {
        let list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
        overrides.push(Override::parse("run.seeds", &format!("[{list}]"))?);
    }
    if let Some(out) = out {
        overrides.push(Override { path: vec!["run".into(), "out_dir".into()], value: out.display().to_string().into() });
    }
    for o in &overrides {
        log::debug!("override {} = {}", o.key(), o.value);
    }
    Ok(ExperimentConfig::load(config, &overrides)?)
}

fn report(label: &str, summary: &RunSummary) {
    for (seed, metrics) in &summary.per_seed {
        let total: usize = metrics.iter().map(|m| m.violations).sum();
        let last = metrics.last().map_or(0.0, |m| m.reward);
        println!("{label} seed {seed}: {} episodes, final reward {last:.2}, total violations {total}", metrics.len());
    }
    if let Some(row) = summary.aggregate.last() {
        println!(
            "{label} episode {}: reward {:.2} ± {:.2}, violations {:.2} ± {:.2}",
            row.episode, row.reward_mean, row.reward_std, row.violations_mean, row.violations_std
        );
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train { config, seeds, out } => {
            let cfg = load(&config, seeds, out)?;
            let summary = experiment::run_experiment(&cfg)?;
            report(&cfg.run.label, &summary);
            println!("wrote {}", cfg.run.out_dir.display());
        }
        Command::Eval { checkpoint, episodes, deterministic, out } => {
            let summary = experiment::eval_policy(&checkpoint, episodes, deterministic, out.as_deref())?;
            report("eval", &summary);
        }
        Command::Sweep { config, param, values, out } => {
            let cfg = load(&config, None, out)?;
            for (value, summary) in experiment::sweep(&cfg, &param, &values)? {
                report(&format!("{param}={value}"), &summary);
            }
            println!("wrote {}", cfg.run.out_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
