use std::path::PathBuf;
use std::process::ExitCode;

use bivad::error::Result;
use bivad_cli::{cmd_bench, cmd_eval, cmd_infer, cmd_synth, cmd_train, load_config};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bivad", version, about = "Bi-directional frame-prediction video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key=value config file (`#` comments, dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `model.eta=1.0`.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `<data_root>/train` and write the best checkpoint.
    Train(Common),
    /// Score `<data_root>/test` videos with a trained checkpoint.
    Infer(Common),
    /// Evaluate score files against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Compute the region-based criterion.
        #[arg(long)]
        rbdc: bool,
        /// Compute the track-based criterion.
        #[arg(long)]
        tbdc: bool,
        /// Fraction of a track that must be detected.
        #[arg(long)]
        alpha: Option<f64>,
        /// Minimum overlap for a region match.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Generate a synthetic dataset under `data_root`.
    Synth(Common),
    /// Time per-frame inference.
    Bench(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(&load_config(c.config.as_deref(), &c.overrides)?).map(drop),
        Command::Infer(c) => cmd_infer(&load_config(c.config.as_deref(), &c.overrides)?).map(drop),
        Command::Eval { common, rbdc, tbdc, alpha, beta } => {
            let mut cfg = load_config(common.config.as_deref(), &common.overrides)?;
            cfg.eval.rbdc |= rbdc;
            cfg.eval.tbdc |= tbdc;
            if let Some(a) = alpha {
                cfg.eval.alpha = a;
            }
            if let Some(b) = beta {
                cfg.eval.beta = b;
            }
            cmd_eval(&cfg).map(drop)
        }
        Command::Synth(c) => cmd_synth(&load_config(c.config.as_deref(), &c.overrides)?).map(drop),
        Command::Bench(c) => cmd_bench(&load_config(c.config.as_deref(), &c.overrides)?).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
