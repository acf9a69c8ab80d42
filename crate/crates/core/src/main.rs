use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvsmc::cli::{self, ExperimentConfig, Overrides, Regime};

/// Deep variational SMC experiments on Lorenz-attractor images.
///
/// Worker threads default to the number of cores; set DVSMC_THREADS to override.
#[derive(Parser)]
#[command(name = "dvsmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and validation datasets.
    Simulate(Common),
    /// Train the DPF and the supervised encoder for each regime.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Score every method on every grid point and seed.
    Evaluate(Common),
    /// Render tracking-error and ELBO figures from evaluation records.
    Plot(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of dpf, bpf, bpf10x, ekf, supervised.
    #[arg(long)]
    methods: Option<String>,
    /// noise or partial.
    #[arg(long)]
    regime: Option<Regime>,
}

impl Common {
    fn resolve(&self) -> dvsmc::Result<ExperimentConfig> {
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            methods: self.methods.as_deref().map(cli::parse_methods).transpose()?,
            regime: self.regime,
        };
        Ok(ExperimentConfig::load(self.config.as_deref())?.apply(&overrides))
    }
}

fn run(cli: Cli) -> dvsmc::Result<()> {
    cli::init_threads()?;
    match cli.command {
        Command::Simulate(c) => cli::simulate(&c.resolve()?).map(drop),
        Command::Train { common, resume } => cli::train(&common.resolve()?, resume),
        Command::Evaluate(c) => cli::evaluate(&c.resolve()?).map(drop),
        Command::Plot(c) => cli::plot(&c.resolve()?).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
