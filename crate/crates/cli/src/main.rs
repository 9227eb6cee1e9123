//! `tokenfuse`: prepare corpora, pre-train specialists, train the fused
//! model, generate, analyze and evaluate. Log verbosity follows `RUST_LOG`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokenfuse::data::Domain;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "tokenfuse", version, about = "Token-level fusion of specialist language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    max_new_tokens: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three synthetic corpora and their split manifests.
    PrepareData {
        /// Overwrite existing corpus files.
        #[arg(long)]
        force: bool,
    },
    /// Pre-train one specialist on its own corpus.
    TrainSpecialist {
        #[arg(long)]
        domain: Domain,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop (with a checkpoint) once this many steps have run.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Two-stage fused training over the three specialists.
    TrainFused,
    /// Generate a response with the fused model.
    Generate {
        #[arg(long)]
        prompt: String,
        /// Route every token to this specialist instead of the gate.
        #[arg(long)]
        domain: Option<Domain>,
        /// Emit one JSON record per step instead of streaming text.
        #[arg(long)]
        trace: bool,
    },
    /// Gate-weight tables, heatmap and a token-level case listing.
    Analyze,
    /// Held-out perplexity of each specialist and the fused model.
    Eval,
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(n) = common.max_new_tokens {
        cfg.max_new_tokens = n;
    }
    if let Some(t) = common.temperature {
        cfg.temperature = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.common)?;
    eprintln!("# resolved configuration (hash {})", cfg.hash());
    eprint!("{}", cfg.to_toml());
    eprintln!("# seed {}", cfg.seed);
    match cli.command {
        Command::PrepareData { force } => commands::prepare_data(&cfg, force),
        Command::TrainSpecialist {
            domain,
            resume,
            stop_after,
        } => commands::train_specialist(&cfg, domain, resume, stop_after),
        Command::TrainFused => commands::train_fused(&cfg),
        Command::Generate { prompt, domain, trace } => commands::generate(&cfg, &prompt, domain, trace),
        Command::Analyze => commands::analyze(&cfg),
        Command::Eval => commands::eval(&cfg),
    }
}

/// 2 config, 3 data, 4 divergence, 5 I/O, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use tokenfuse::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 2,
                E::Domain(_) | E::Alphabet(_) | E::Sampler(_) | E::Alignment(_) | E::Length { .. } | E::Vocab { .. } => 3,
                E::Divergence { .. } => 4,
                E::Io { .. } | E::Checkpoint(_) => 5,
                E::Engine { cause, .. } if matches!(**cause, E::Io { .. }) => 5,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 5;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
