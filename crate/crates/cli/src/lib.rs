//! Command-line front end: scenario documents, run orchestration and report files.

pub mod commands;
pub mod report;
pub mod scenario;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use zakai_core::{Error, Result};

use commands::Suite;
use report::Report;
use scenario::{prepare, Overrides};

#[derive(Debug, Parser)]
#[command(name = "zakai-lab", version, about = "Particle filters and superposition checks for correlated-noise Zakai equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario document (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the scenario's.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 picks the number of cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long = "dt-override", global = true)]
    pub dt_override: Option<f64>,
    #[arg(long = "particles-override", global = true)]
    pub particles_override: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the truth, the observation-derived driver and the filter path.
    Simulate,
    /// Run verification suites (all of them unless --suite is given).
    Verify {
        #[arg(long, value_enum)]
        suite: Vec<Suite>,
    },
    /// Check the structural assumptions of the system.
    Audit,
    /// Re-run a recorded simulation and compare its artifacts byte for byte.
    Replay,
}

/// Reports emitted by a command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub reports: Vec<Report>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        report::all_pass(&self.reports)
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            dt: self.dt_override,
            particles: self.particles_override,
        }
    }

    fn scenario(&self) -> Result<scenario::Scenario> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::config("--config", "a scenario document is required"))?;
        prepare(path, &self.overrides())
    }
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let reports = match &cli.command {
        Command::Simulate => {
            commands::simulate(&cli.scenario()?)?;
            Vec::new()
        }
        Command::Verify { suite } => {
            let suites = if suite.is_empty() { Suite::ALL.to_vec() } else { suite.clone() };
            commands::verify(&cli.scenario()?, &suites)?
        }
        Command::Audit => commands::audit(&cli.scenario()?)?,
        Command::Replay => {
            let out = match (&cli.out, &cli.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => cli.scenario()?.output,
                (None, None) => return Err(Error::config("--out", "replay needs --out or --config")),
            };
            commands::replay(&out)?
        }
    };
    Ok(Outcome { reports })
}

/// Run a parsed command line on a pool of `cli.threads` workers.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::config("--threads", e.to_string()))?;
    pool.install(|| dispatch(cli))
}
