use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use h2tune::experiment::{self, ExperimentError, RunOptions, TransportKind};
use h2tune::federation::Arm;

#[derive(Parser)]
#[command(
    name = "h2tune",
    version,
    about = "Desk-scale heterogeneous federated fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more arms on a scenario; writes metrics, summary and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Arms to train: H2TUNE, LOCAL, NO_DISENTANGLE, NO_MASK (comma-separated).
        #[arg(long, value_delimiter = ',', default_value = "H2TUNE")]
        baseline: Vec<Arm>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Finite-difference check of every client's gradients before training.
        #[arg(long)]
        check_grads: bool,
        #[arg(long, value_enum)]
        transport: Option<Transport>,
    },
    /// Print per-client final-accuracy deltas between run directories as CSV.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Transport {
    Inproc,
    Files,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run {
            config,
            rounds,
            seed,
            baseline,
            out,
            check_grads,
            transport,
        } => {
            let opts = RunOptions {
                rounds,
                seed,
                arms: baseline,
                out,
                check_grads,
                transport: transport.map(|t| match t {
                    Transport::Inproc => TransportKind::Inproc,
                    Transport::Files => TransportKind::Files,
                }),
                ..RunOptions::new(config)
            };
            let summary = experiment::run(&opts)?;
            if let Some(err) = summary.grad_check {
                println!("gradient check: worst relative error {err:.3e}");
            }
            for arm in &summary.arms {
                println!(
                    "{} seed {}: mean final accuracy {:.4} ({:.1}s)",
                    arm.arm, summary.manifest.seed, arm.mean_final_accuracy, arm.runtime_secs
                );
            }
            println!("outputs in {}", summary.manifest.out_dir.display());
        }
        Command::Compare { dirs } => print!("{}", experiment::compare_arms(&dirs)?),
    }
    Ok(())
}
