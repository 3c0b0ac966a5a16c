use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use skillcal::pipeline::{self, RunConfig};
use skillcal::SyntheticDesign;

#[derive(Parser)]
#[command(
    name = "skillcal",
    version,
    about = "Calibrated skill-prevalence estimates from online job ads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known truth.
    Simulate {
        /// Design file; the bundled fixture design when omitted.
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Emit perturbed instead of exact totals.
        #[arg(long)]
        noisy_totals: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Point estimates only.
    Estimate(RunArgs),
    /// Point estimates plus the bootstrap.
    Bootstrap(RunArgs),
    /// Print the tables of a finished run.
    Report {
        #[arg(long, conflicts_with = "output")]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    freeze_lambda: bool,
    #[arg(long)]
    dump_draws: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.replicates {
            cfg.bootstrap.replicates = b;
        }
        if self.workers.is_some() {
            cfg.bootstrap.workers = self.workers;
        }
        cfg.bootstrap.freeze_lambda |= self.freeze_lambda;
        cfg.bootstrap.dump_draws |= self.dump_draws;
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            design,
            seed,
            noisy_totals,
            output,
        } => {
            let mut d = match design {
                Some(p) => SyntheticDesign::load(&p).with_context(|| format!("loading design {}", p.display()))?,
                None => SyntheticDesign::fixture(),
            };
            d.noisy_totals |= noisy_totals;
            let out = pipeline::simulate(&d, seed, &output)?;
            eprintln!("wrote {} ads to {}", out.sample.len(), output.display());
        }
        Command::Estimate(args) => {
            let cfg = args.config()?;
            pipeline::run_estimate(&cfg)?;
            print!("{}", pipeline::render_report(&cfg.output)?);
        }
        Command::Bootstrap(args) => {
            let cfg = args.config()?;
            let report = pipeline::run_bootstrap(&cfg)?;
            if let Some(b) = &report.bootstrap {
                eprintln!("{} replicates kept, {} dropped", b.retained.len(), b.dropped);
            }
            print!("{}", pipeline::render_report(&cfg.output)?);
        }
        Command::Report { config, output } => {
            let dir = match (config, output) {
                (_, Some(o)) => o,
                (Some(c), None) => RunConfig::load(&c)?.output,
                (None, None) => anyhow::bail!("pass --config or --output"),
            };
            print!("{}", pipeline::render_report(&dir)?);
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
