//! `measure`: generate the synthetic benchmark, pre-train the encoder,
//! train the sequence classifier on frozen features, and evaluate or
//! diagnose the result. Exit codes: 0 ok, 1 a contract failed during the
//! run (divergence, mismatched artifacts, a failed check), 2 bad input.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{load_config, resolve_out, split_overrides, CliResult, RunConfig};

const OVERRIDE_HELP: &str = "Any --<key.path>=<value> flag overrides the matching config key, \
e.g. --loss.alpha=0.001 or --synth.domains=4; top-level scalars work without a dot \
(--seed=3). Values parse as JSON where possible, otherwise as strings. Flags win over \
--config, which wins over built-in defaults.";

#[derive(Parser)]
#[command(
    name = "measure",
    version,
    about = "Multi-scale minimal-sufficient representation pipeline for multi-domain signals",
    after_help = OVERRIDE_HELP
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted keys take built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain benchmark to a dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset file to write (default <out_root>/dataset.msd).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// First stage: train the encoder and projection heads on augmented views.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Run directory (default <out_root>/pretrain).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Second stage: train the sequence classifier on frozen encoder features.
    Stage {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Encoder checkpoint from pretrain.
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        /// Run directory (default <out_root>/stage).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Score trained checkpoints on their held-out test domains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Encoder checkpoint from pretrain.
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        /// Staging checkpoint from stage.
        #[arg(long, value_name = "FILE")]
        staging: PathBuf,
        /// Run directory (default <out_root>/eval).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Information diagnostics for an encoder checkpoint.
    Info {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Encoder checkpoint from pretrain.
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        /// Run directory (default <out_root>/info).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Ablation grid over the objective variants plus an alpha sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Run directory (default <out_root>/ablate).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common, overrides: &[String]) -> CliResult<RunConfig> {
    load_config(common.config.as_deref(), overrides)
}

fn run(cli: Cli, overrides: &[String]) -> CliResult<()> {
    match cli.cmd {
        Cmd::GenData { common, out } => {
            let cfg = load(&common, overrides)?;
            let out = resolve_out(out, &cfg, "dataset.msd");
            commands::cmd_gen_data(&cfg, &out)
        }
        Cmd::Pretrain { common, dataset, out } => {
            let cfg = load(&common, overrides)?;
            let out = resolve_out(out, &cfg, "pretrain");
            commands::cmd_pretrain(&cfg, &dataset, &out)
        }
        Cmd::Stage { common, dataset, encoder, out } => {
            let cfg = load(&common, overrides)?;
            let out = resolve_out(out, &cfg, "stage");
            commands::cmd_stage(&cfg, &dataset, &encoder, &out)
        }
        Cmd::Eval { common, dataset, encoder, staging, out } => {
            let cfg = load(&common, overrides)?;
            let out = resolve_out(out, &cfg, "eval");
            commands::cmd_eval(&cfg, &dataset, &encoder, &staging, &out)
        }
        Cmd::Info { common, dataset, encoder, out } => {
            let cfg = load(&common, overrides)?;
            let out = resolve_out(out, &cfg, "info");
            commands::cmd_info(&cfg, &dataset, &encoder, &out)
        }
        Cmd::Gradcheck { common } => {
            let cfg = load(&common, overrides)?;
            commands::cmd_gradcheck(&cfg)
        }
        Cmd::Ablate { common, dataset, out } => {
            let cfg = load(&common, overrides)?;
            let out = resolve_out(out, &cfg, "ablate");
            commands::cmd_ablate(&cfg, &dataset, &out)
        }
    }
}

fn main() -> ExitCode {
    let (argv, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(argv);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
