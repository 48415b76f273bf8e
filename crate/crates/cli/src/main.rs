//! Command-line front end for the rectified-flow inversion and editing lab.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rfedit_core::harness::{run, RunConfig};
use rfedit_core::trajectory::compare_trajectories;
use rfedit_core::{Error, Execution, Trajectory};

#[derive(Parser)]
#[command(
    name = "rfedit",
    version,
    about = "Rectified-flow inversion and editing lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a conditional flow on a Gaussian mixture.
    Train(RunArgs),
    /// Forward inversion of a latent.
    Invert(RunArgs),
    /// Inversion followed by backward reconstruction.
    Reconstruct(RunArgs),
    /// Invert under a source condition and edit toward a target.
    Edit(RunArgs),
    /// Sequential edits sharing one inversion.
    Multiturn(RunArgs),
    /// Reconstruction error per solver and step count.
    Bench(RunArgs),
    /// Check the error bounds on analytic fields.
    VerifyBounds(RunArgs),
    /// Compare alpha-scheduler variants on one edit.
    Sweep(RunArgs),
    /// Finite-difference check of the training gradient.
    GradCheck(RunArgs),
    /// Largest per-step distance between two trajectory files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the result as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Override the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else if err.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_FAILURE
    }
}

/// Print a machine-readable error record to stderr and, when possible, to
/// `error.json` in the output directory.
fn report(err: &Error, out_dir: Option<&Path>) -> ExitCode {
    let code = exit_code(err);
    let record = json!({
        "error": err.kind(),
        "message": err.to_string(),
        "step": err.step(),
        "turn": err.turn(),
        "exit_code": code,
    });
    let text = serde_json::to_string_pretty(&record).expect("error record serializes");
    eprintln!("{text}");
    if let Some(dir) = out_dir {
        if fs::create_dir_all(dir).is_ok() {
            let _ = fs::write(dir.join("error.json"), format!("{text}\n"));
        }
    }
    ExitCode::from(code)
}

fn run_verb(verb: &str, args: &RunArgs) -> Result<(), Error> {
    let mut config = RunConfig::load(&args.config)?;
    if config.experiment.name() != verb {
        return Err(Error::InvalidConfig(format!(
            "config describes a `{}` experiment, command expects `{verb}`",
            config.experiment.name()
        )));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.sequential {
        config.execution = Execution::Sequential;
    }
    let result = run(&config, &args.out)?;
    println!("{}", serde_json::to_string(&result["result"])?);
    Ok(())
}

fn compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<(), Error> {
    let ta = Trajectory::load(a)?;
    let tb = Trajectory::load(b)?;
    let dev = compare_trajectories(&ta, &tb)?;
    let record = json!({ "max_deviation": dev, "n_steps": ta.n_steps() });
    let text = serde_json::to_string_pretty(&record)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, args) = match &cli.command {
        Command::Train(a) => ("train", a),
        Command::Invert(a) => ("invert", a),
        Command::Reconstruct(a) => ("reconstruct", a),
        Command::Edit(a) => ("edit", a),
        Command::Multiturn(a) => ("multi_turn", a),
        Command::Bench(a) => ("bench_solvers", a),
        Command::VerifyBounds(a) => ("verify_bounds", a),
        Command::Sweep(a) => ("sweep_alpha_schedulers", a),
        Command::GradCheck(a) => ("grad_check", a),
        Command::Compare { a, b, out } => {
            return match compare(a, b, out.as_deref()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => report(&e, None),
            }
        }
    };
    match run_verb(verb, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e, Some(&args.out)),
    }
}
