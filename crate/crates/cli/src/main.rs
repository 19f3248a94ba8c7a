use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use quest_cli::commands::{self, CompareArgs};
use quest_cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "quest", version, about = "Metropolis-Hastings sampling from reward-tilted language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML); defaults to the built-in toy setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `chain.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for chains.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.chain.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        let out = cfg.output_dir.clone();
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample chains and baselines and write reports.
    Run(Common),
    /// Compare samplers against the enumerated target on a small model.
    Oracle(Common),
    /// Diagnostics over existing trace and sample files.
    Compare {
        /// Chain traces written by `run`.
        #[arg(long, num_args = 1.., required = true)]
        traces: Vec<PathBuf>,
        /// Ancestral sample files or other traces.
        #[arg(long, num_args = 1..)]
        baselines: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Enables the proposal reward-delta study.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            let s = commands::run(&cfg, &out, c.jobs.max(1))?;
            println!(
                "{} chains, acceptance {:.3}, mean reward {:.4}, output in {}",
                s.chains,
                s.report.acceptance_rate,
                s.report.mean_quality,
                out.display()
            );
        }
        Command::Oracle(c) => {
            let (cfg, out) = c.load()?;
            let s = commands::oracle(&cfg, &out, c.jobs.max(1))?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Compare {
            traces,
            baselines,
            out,
            config,
            burn_in,
        } => {
            let config = config.map(|p| ExperimentConfig::load(&p)).transpose()?;
            let s = commands::compare(&CompareArgs {
                traces,
                baselines,
                out: out.clone(),
                burn_in,
                config,
            })?;
            println!("compared {} traces, output in {}", s.traces.len(), out.display());
        }
    }
    Ok(())
}
