use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use infoat_cli::commands::{self, Diagnostic};
use infoat_cli::config::{split_overrides, Experiment};

/// Adversarial-training lab. Any config key can be overridden with
/// `--section.key value`, e.g. `--train.lambda 2.5`.
#[derive(Parser)]
#[command(name = "infoat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.ibat, train_report.csv and config.cfg.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under one or more attacks; writes eval_report.csv.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config to use instead of the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated attack kinds, e.g. `fgsm,pgd20,cw30`.
        #[arg(long)]
        kinds: Option<String>,
        /// Radius as a decimal or a fraction such as `8/255`.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy, minimum-perturbation and loss-surface diagnostics.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        which: Diagnostic,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        eps_max: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of the [grid] section; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Run cells concurrently. Outputs are identical to a sequential run.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let exp = Experiment::parse(&commands::read_config(&config)?, &overrides)?;
            commands::cmd_train(exp, &commands::out_dir(out, "train"))
        }
        Command::Attack {
            checkpoint,
            config,
            kinds,
            eps,
            out,
        } => {
            overrides.extend(kinds.map(|k| ("eval.kinds".to_string(), k)));
            overrides.extend(eps.map(|e| ("eval.epsilon".to_string(), e)));
            let text = config.map(|p| commands::read_config(&p)).transpose()?;
            let (ck, exp) = commands::open_checkpoint(&checkpoint, text.as_deref(), &overrides)?;
            commands::cmd_attack(&ck, &exp, &commands::out_dir(out, "attack"))
        }
        Command::Diagnose {
            checkpoint,
            which,
            config,
            eps_max,
            out,
        } => {
            overrides.extend(eps_max.map(|e| ("eval.eps_max".to_string(), e)));
            let text = config.map(|p| commands::read_config(&p)).transpose()?;
            let (ck, exp) = commands::open_checkpoint(&checkpoint, text.as_deref(), &overrides)?;
            commands::cmd_diagnose(&ck, &exp, which, &commands::out_dir(out, "diagnose"))
        }
        Command::Ablate { config, parallel, out } => {
            let exp = Experiment::parse(&commands::read_config(&config)?, &overrides)?;
            let rows = commands::cmd_ablate(exp, &commands::out_dir(out, "ablate"), parallel)?;
            let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see ablation.csv", rows.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
