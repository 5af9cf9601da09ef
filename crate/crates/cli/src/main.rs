//! `simunc`: generate data, train, evaluate, run ablations and gradient checks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simunc_core::numerics::GradFault;

use config::RunConfig;
use error::{CliError, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "simunc", version, about = "Uncertainty-aware few-shot metric learning experiments")]
struct Cli {
    /// Worker threads for parallel evaluation; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.stage1.epochs=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (beats `output_dir` and $SIMUNC_OUT_DIR).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic base and novel embedding files and print their digests.
    Gen(Common),
    /// Run both training stages and write a checkpoint and loss log.
    Train(Common),
    /// Evaluate a checkpoint on novel-class episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to the one in the output directory.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Also write per-episode accuracies.
        #[arg(long)]
        dump_accuracies: bool,
    },
    /// Stage-uncertainty grid plus estimator sweep over shared seeds.
    Ablate(Common),
    /// Finite-difference check of every parameter group; exits 4 on failure.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale the backward rule of OP (test fixture).
        #[arg(long, value_name = "OP", hide = true)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 1.01, hide = true)]
        fault_factor: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let load = |c: &Common| RunConfig::load(c.config.as_deref(), &c.overrides);
    match command {
        Command::Gen(c) => {
            let cfg = load(&c)?;
            commands::gen(&cfg, &cfg.output_dir(c.out.as_deref())).map(|_| ())
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            commands::train(&cfg, &cfg.output_dir(c.out.as_deref())).map(|_| ())
        }
        Command::Eval {
            common,
            checkpoint,
            dump_accuracies,
        } => {
            let mut cfg = load(&common)?;
            cfg.eval.dump_accuracies |= dump_accuracies;
            commands::eval(&cfg, checkpoint.as_deref(), &cfg.output_dir(common.out.as_deref()))
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            commands::ablate(&cfg, &cfg.output_dir(c.out.as_deref()))
        }
        Command::Gradcheck {
            common,
            inject_fault,
            fault_factor,
        } => {
            let cfg = load(&common)?;
            let fault = inject_fault.map(|op| GradFault {
                op: Box::leak(op.into_boxed_str()),
                factor: fault_factor,
            });
            // Only write files when a destination was asked for.
            let out = (common.out.is_some() || cfg.output_dir.is_some()).then(|| cfg.output_dir(common.out.as_deref()));
            commands::gradcheck(&cfg, fault, out.as_deref())
        }
    }
}
