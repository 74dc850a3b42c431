mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use kvtune::advisor::{AdvisorKind, PromptStrategy};

use crate::commands::CliError;
use crate::config::RunConfig;

/// Workload characterization, benchmark synthesis and iterative tuning of
/// LSM-tree key-value store options.
#[derive(Debug, Parser)]
#[command(name = "kvtune", version)]
struct Cli {
    /// Configuration file with `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesized specs; also replaces the seed of specs passed to bench and tune.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prompt strategy: full-history, subset-split, latest-only, resource-grouped.
    #[arg(long, global = true)]
    strategy: Option<PromptStrategy>,
    /// Advisor backend: remote, scripted, replay.
    #[arg(long, global = true)]
    advisor: Option<AdvisorKind>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit distributions to a CSV trace and write the characterization as JSON.
    Characterize {
        trace: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Window length for the time-window summaries.
        #[arg(long, default_value_t = 10.0)]
        window_s: f64,
        /// Ask the advisor for other families when a fit is poor.
        #[arg(long)]
        refine: bool,
    },
    /// Turn a characterization into a workload spec.
    Synthesize {
        characterization: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// Total operations to issue; key space and duration scale with it.
        #[arg(long)]
        target_records: Option<u64>,
    },
    /// Run one benchmark and write its result.
    Bench {
        spec: PathBuf,
        /// Options file; the engine defaults when absent.
        #[arg(long)]
        options: Option<PathBuf>,
        /// Result JSON.
        #[arg(short, long)]
        out: PathBuf,
        /// Per-window telemetry CSV.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Run the tuning loop, journaling every iteration.
    Tune {
        spec: PathBuf,
        #[arg(long)]
        options: Option<PathBuf>,
        #[arg(long)]
        journal: PathBuf,
        /// Where the best options file is written.
        #[arg(long)]
        best: PathBuf,
        /// Continue from an existing journal.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Print a per-iteration table of a journal.
    Report {
        journal: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli, stop: Arc<AtomicBool>) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Input)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.seed_set = true;
    }
    if let Some(s) = cli.strategy {
        cfg.strategy = s;
    }
    if let Some(a) = cli.advisor {
        cfg.advisor.kind = a;
    }
    match cli.command {
        Command::Characterize {
            trace,
            out,
            window_s,
            refine,
        } => commands::characterize(&cfg, &trace, &out, window_s, refine),
        Command::Synthesize {
            characterization,
            out,
            name,
            target_records,
        } => commands::synthesize(&cfg, &characterization, &out, name, target_records),
        Command::Bench {
            spec,
            options,
            out,
            timeline,
        } => commands::bench(&cfg, &spec, options.as_deref(), &out, timeline.as_deref(), stop),
        Command::Tune {
            spec,
            options,
            journal,
            best,
            resume,
            max_iterations,
        } => {
            if let Some(n) = max_iterations {
                cfg.budget.max_iterations = n;
            }
            commands::tune(&cfg, &spec, options.as_deref(), &journal, &best, resume, stop)
        }
        Command::Report { journal, csv } => commands::report(&journal, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let installed = ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(commands::EXIT_INTERRUPTED);
        }
        eprintln!("interrupt: finishing the current step; press again to abort");
    });
    if let Err(e) = installed {
        log::warn!("no interrupt handler: {e}");
    }

    match run(cli, stop) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kvtune: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
