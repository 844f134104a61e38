//! `globules`: simulate hard-core Brownian globules, sample their stationary
//! laws and run path diagnostics.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
//! 1 anything else (I/O).

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Output;
use crate::config::{validate, Needs, RawConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "globules", version, about = "Hard-core Brownian globules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the configuration file; a flag overrides the file.
#[derive(Args, Debug, Default)]
struct Common {
    /// TOML file with [model], [run] and [diagnostics] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact root.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rminus: Option<f64>,
    #[arg(long)]
    rplus: Option<f64>,
    #[arg(long)]
    ell: Option<i64>,
    /// Configuration file of external globules.
    #[arg(long)]
    external: Option<PathBuf>,
    #[arg(long = "T")]
    t_final: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of globules.
    #[arg(long)]
    n: Option<i64>,
    #[arg(long)]
    n_trajectories: Option<i64>,
    /// Record every `stride`-th step.
    #[arg(long)]
    stride: Option<i64>,
    #[arg(long)]
    burn_in: Option<i64>,
    #[arg(long)]
    thinning: Option<i64>,
    #[arg(long)]
    samples: Option<i64>,
    #[arg(long)]
    chains: Option<i64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    chain_len: Option<i64>,
    #[arg(long)]
    scale: Option<i64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    functionals: Option<Vec<String>>,
}

impl Common {
    fn as_raw(&self) -> RawConfig {
        let mut r = RawConfig::default();
        r.model.sigma = self.sigma;
        r.model.r_minus = self.rminus;
        r.model.r_plus = self.rplus;
        r.model.ell = self.ell;
        r.model.external = self.external.clone();
        r.run.t_final = self.t_final;
        r.run.dt = self.dt;
        r.run.seed = self.seed;
        r.run.n_globules = self.n;
        r.run.n_trajectories = self.n_trajectories;
        r.run.stride = self.stride;
        r.run.burn_in = self.burn_in;
        r.run.thinning = self.thinning;
        r.run.samples = self.samples;
        r.run.chains = self.chains;
        r.diagnostics.delta = self.delta;
        r.diagnostics.epsilon = self.epsilon;
        r.diagnostics.chain_len = self.chain_len;
        r.diagnostics.scale = self.scale;
        r.diagnostics.rho = self.rho;
        r.diagnostics.epsilons = self.epsilons.clone();
        r.diagnostics.times = self.times.clone();
        r.diagnostics.functionals = self.functionals.clone();
        r
    }

    fn resolve(&self, init: Option<PathBuf>) -> Result<RawConfig, CliError> {
        let base = match &self.config {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        let mut flags = self.as_raw();
        flags.run.init = init;
        Ok(base.overlay(&flags))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories from an init file or from stationary draws.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Initial configuration file.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output file when a single trajectory is simulated.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw configurations from the stationary law (fixed `n` when given,
    /// the penalized measure otherwise).
    SampleStationary {
        #[command(flatten)]
        common: Common,
        /// Output file when a single sample is drawn.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Path diagnostics of trajectory files.
    Diagnose {
        #[command(flatten)]
        common: Common,
        files: Vec<PathBuf>,
    },
    /// Epsilon-chain probability curve of stationary samples and its log-log fit.
    ScalingChain {
        #[command(flatten)]
        common: Common,
    },
    /// Modulus-of-continuity tail of simulated trajectories.
    ScalingModulus {
        #[command(flatten)]
        common: Common,
    },
    /// Forward against time-reversed functional estimates.
    Reversibility {
        #[command(flatten)]
        common: Common,
    },
    /// Sampler, dynamics and diagnostics from one configuration.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn execute(cmd: Command) -> Result<(), CliError> {
    let dynamics = Needs {
        dynamics: true,
        globules: true,
        init_allowed: true,
        ..Needs::default()
    };
    let (name, common, init, needs) = match &cmd {
        Command::Simulate { common, init, .. } => ("simulate", common, init.clone(), dynamics),
        Command::SampleStationary { common, .. } => ("sample-stationary", common, None, Needs::default()),
        Command::Diagnose { common, .. } => ("diagnose", common, None, Needs::default()),
        Command::ScalingChain { common } => (
            "scaling-chain",
            common,
            None,
            Needs {
                epsilons: true,
                ..Needs::default()
            },
        ),
        Command::ScalingModulus { common } => (
            "scaling-modulus",
            common,
            None,
            Needs {
                path_diagnostics: true,
                epsilons: true,
                ..dynamics
            },
        ),
        Command::Reversibility { common } => ("reversibility", common, None, dynamics),
        Command::Run { common } => (
            "run",
            common,
            None,
            Needs {
                path_diagnostics: true,
                ..dynamics
            },
        ),
    };
    let cfg = validate(&common.resolve(init)?, needs)?;
    let mut out = Output::new(&common.out_dir)?;
    match &cmd {
        Command::Simulate { out: single, .. } => commands::simulate(&cfg, &mut out, single.as_deref())?,
        Command::SampleStationary { out: single, .. } => commands::sample_stationary(&cfg, &mut out, single.as_deref())?,
        Command::Diagnose { files, .. } => commands::diagnose(&cfg, &mut out, files)?,
        Command::ScalingChain { .. } => commands::scaling_chain(&cfg, &mut out)?,
        Command::ScalingModulus { .. } => commands::scaling_modulus(&cfg, &mut out)?,
        Command::Reversibility { .. } => commands::reversibility(&cfg, &mut out)?,
        Command::Run { .. } => commands::run_experiment(&cfg, &mut out)?,
    }
    out.finish(name, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
