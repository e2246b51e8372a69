//! `cotrain`: generate synthetic domains, train and evaluate detectors, run
//! the variant ablation and draw the proposal-coverage plot.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cotrain",
    version,
    about = "Collaborative RPN/RPC self-training experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment file; unspecified fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one field by dotted path, e.g. `train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Data seed for generate, training seed for train and eval, the only
    /// seed for ablate.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Experiment output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replace existing artifacts instead of refusing or resuming.
    #[arg(long, global = true)]
    pub force: bool,
    /// Variant name: source_only, naive_local, weighted_local, cst_only,
    /// mcd_only, weighted_cst or full. Repeatable for ablate.
    #[arg(long = "variant", global = true, value_name = "NAME")]
    pub variant: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the source-train, target-train and target-eval splits.
    Generate,
    /// Train one variant through the three stages, resuming finished stages.
    Train,
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        /// Checkpoint to evaluate; defaults to the final checkpoint of the
        /// selected variant and seed.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate on: source_train, target_train or target_eval.
        #[arg(long, default_value = "target_eval")]
        split: String,
    },
    /// Train and evaluate every ablation arm over all seeds.
    Ablate,
    /// Render the coverage plot from the ablation plot data.
    Plot {
        /// Plot-data file; defaults to the ablation output.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Print the effective experiment configuration as TOML.
    Config,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let common = &cli.common;
    let result = match cli.command {
        Command::Generate => commands::generate(common),
        Command::Train => commands::train(common),
        Command::Eval { checkpoint, split } => commands::eval(common, checkpoint, &split),
        Command::Ablate => commands::ablate(common),
        Command::Plot { input } => commands::plot(common, input),
        Command::Config => commands::show_config(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
