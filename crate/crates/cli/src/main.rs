use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divtok::error::Error;
use divtok::harness::{run, Experiment, RunConfig};

/// Divergent-token metrics and metric-guided compression experiments.
#[derive(Debug, Parser)]
#[command(name = "divtok", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate a compressed model against its base on sampled probes.
    Metrics(Common),
    /// Compare lowest-magnitude and random pruning across metrics.
    Discriminate(Common),
    /// Run the iterative FDT-guided sparsification schedule.
    Sparsify(Common),
    /// Beam search over component sets to quantize.
    Quantsearch(Common),
    /// Train a model on a corpus and save the checkpoint.
    Train(Common),
    /// Check the analytic metric properties on random logits.
    Props(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (Experiment, Common) {
        match self {
            Command::Metrics(c) => (Experiment::Metrics, c),
            Command::Discriminate(c) => (Experiment::Discriminate, c),
            Command::Sparsify(c) => (Experiment::Sparsify, c),
            Command::Quantsearch(c) => (Experiment::Quantsearch, c),
            Command::Train(c) => (Experiment::Train, c),
            Command::Props(c) => (Experiment::Props, c),
        }
    }
}

const EXIT_ASSERTION: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Argument(_) | Error::TomlDe(_))
}

fn resolve(experiment: Experiment, args: Common) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(experiment),
    };
    if cfg.experiment != experiment {
        return Err(Error::Argument(format!(
            "config describes a {} run but the {experiment} command was given",
            cfg.experiment
        )));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (experiment, args) = cli.command.split();
    let cfg = match resolve(experiment, args).and_then(|c| c.validate().map(|()| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(w) = cfg.workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cfg) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("{experiment}: assertions failed");
                ExitCode::from(EXIT_ASSERTION)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_usage(&e) { EXIT_USAGE } else { EXIT_ASSERTION })
        }
    }
}
