use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod io;
mod settings;

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "fedcov", version, about = "Federated standardization, confound correction and PCA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-center dataset with known ground truth.
    Synth {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all centers and the coordinator in this process.
    Run {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exchange directory for `--transport file` (default: OUT/exchange).
        #[arg(long)]
        exchange: Option<PathBuf>,
    },
    /// Compare a result against the centralized computation on pooled data.
    Compare {
        #[arg(long)]
        results: PathBuf,
        /// Dataset directory, if not the one recorded in the results.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        m: usize,
    },
    /// Write plot-ready CSVs from one or more result directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        m: usize,
    },
    /// Serve one center over a shared exchange directory.
    CenterAgent {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        center_id: u32,
        #[arg(long)]
        exchange: PathBuf,
        #[arg(long, default_value_t = 20)]
        poll_ms: u64,
        #[arg(long, default_value_t = 120_000)]
        idle_timeout_ms: u64,
    },
    /// Coordinate centers over a shared exchange directory.
    Coordinator {
        #[command(flatten)]
        settings: Settings,
        /// Dataset manifest and ground truth only; center data is not read.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        exchange: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        poll_ms: u64,
        #[arg(long, default_value_t = 120_000)]
        idle_timeout_ms: u64,
    },
    /// Repeated synthetic folds over several center counts.
    Experiment {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated center counts; defaults to --centers.
        #[arg(long, value_delimiter = ',')]
        center_counts: Vec<usize>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { settings, out } => commands::synth(&settings, &out),
        Command::Run {
            settings,
            data,
            out,
            exchange,
        } => commands::run(&settings, &data, &out, exchange.as_deref()),
        Command::Compare { results, data, m } => commands::compare_cmd(&results, data.as_deref(), m),
        Command::Report { results, out, data, m } => commands::report(&results, &out, m, data.as_deref()),
        Command::CenterAgent {
            settings,
            data,
            center_id,
            exchange,
            poll_ms,
            idle_timeout_ms,
        } => commands::center_agent(&settings, &data, center_id, &exchange, (poll_ms, idle_timeout_ms)),
        Command::Coordinator {
            settings,
            data,
            exchange,
            out,
            poll_ms,
            idle_timeout_ms,
        } => commands::coordinator(&settings, data.as_deref(), &exchange, &out, (poll_ms, idle_timeout_ms)),
        Command::Experiment {
            settings,
            out,
            center_counts,
        } => commands::experiment(&settings, &out, &center_counts),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDCOV_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::AuditFailed>().is_some() {
                ExitCode::from(2)
            } else if matches!(e.downcast_ref::<fedcov::Error>(), Some(fedcov::Error::PhaseTimeout { .. })) {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
