//! Command-line front door: `run`, `cluster-demo`, `gradcheck`, and `compare`
//! over JSON experiment configs, emitting JSON-lines metrics and CSV tables.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime error, 3 check failure.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Errors classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::CheckFailed(m) => m,
        }
    }
}

impl From<fedlease_core::Error> for CliError {
    fn from(e: fedlease_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fedlease",
    version,
    about = "Desk-scale federated LoRA expert laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured training strategy and write metrics, summary,
    /// selection statistics, and per-round checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Also dump every client's dataset as CSV under `data/`.
        #[arg(long)]
        dump_data: bool,
    },
    /// Initialization phase plus clustering only: emits the distance matrix,
    /// the silhouette table, and the chosen partition.
    ClusterDemo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference validation of the analytic gradients on margin-safe
    /// probes; exits 3 if the worst relative error reaches 1e-4.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of probe models.
        #[arg(long, default_value_t = 50)]
        probes: usize,
        /// Expert count of the probe models (1 exercises the plain path).
        #[arg(long, default_value_t = 3)]
        experts: usize,
        /// Negative control: corrupt one analytic gradient entry per probe.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Run several configs (same task spec, different modes) over a shared
    /// seed set and tabulate mean and standard deviation of final accuracy.
    Compare {
        /// Config file; repeat once per mode.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list; defaults to seed..seed+5 from the
        /// configs.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            dump_data,
        } => commands::cmd_run(&config, out.as_deref(), seed, dump_data),
        Command::ClusterDemo { config, out, seed } => {
            commands::cmd_cluster_demo(&config, out.as_deref(), seed)
        }
        Command::Gradcheck {
            config,
            seed,
            probes,
            experts,
            corrupt,
        } => commands::cmd_gradcheck(&config, seed, probes, experts, corrupt),
        Command::Compare {
            configs,
            out,
            seeds,
            seed,
        } => commands::cmd_compare(&configs, out.as_deref(), seeds.as_deref(), seed),
    }
}

/// Full argv-to-exit-code path used by the binary and by tests.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
