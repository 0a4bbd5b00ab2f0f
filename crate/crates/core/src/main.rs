use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clfstab::cli::{self, EXIT_VALIDATION};
use clfstab::Error;

#[derive(Parser)]
#[command(
    name = "clfstab",
    version,
    about = "Feedback-synthesis workbench: CLF-based controllers, sampled closed loops, \
             stabilizability obstructions, ISS/iISS analysis"
)]
struct Cli {
    /// JSON config file ({"schema":1,"command":...,"args":{...}}); flags
    /// override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Exit 4 when a verification command reports violations
    #[arg(long, global = true)]
    strict: bool,
    /// Cap worker threads (also honored from CLFSTAB_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List catalog systems or show one (JSON)
    Zoo {
        #[command(subcommand)]
        what: ZooCmd,
    },
    /// Integrate a closed loop (classical or sample-and-hold) to CSV
    Simulate(cli::SimulateArgs),
    /// Build a feedback law and export its values / envelope grids
    Synthesize(cli::SynthesizeArgs),
    /// Grid-check a CLF decrease condition on an annulus
    ClfVerify(cli::ClfVerifyArgs),
    /// Run the stabilizability obstruction tests on a catalog system
    CheckBrockett(cli::BrockettArgs),
    /// Rank test for an explicit linear pair (A, B)
    BrockettLinear(cli::BrockettLinearArgs),
    /// Probe asymptotic gains and fit a monotone gain envelope
    IssFit(cli::IssFitArgs),
    /// Check a Lyapunov dissipation candidate on a state/input grid
    LyapVerify(cli::LyapVerifyArgs),
    /// Grid-check the envelope decrease margin on an annulus
    EnvelopeCheck(cli::EnvelopeCheckArgs),
    /// Sampled robust-stabilization experiment over schedules and errors
    SweepRobustness(cli::SweepArgs),
}

#[derive(Subcommand)]
enum ZooCmd {
    /// All catalog names
    List,
    /// JSON description of one system
    Show { name: String },
}

fn dispatch(cli_args: Cli) -> clfstab::Result<i32> {
    let config = cli_args.config.as_deref();
    let strict = cli_args.strict;
    let load = |cmd: &str| -> clfstab::Result<Option<serde_json::Value>> {
        match config {
            Some(path) => Ok(Some(cli::load_config(path, cmd)?)),
            None => Ok(None),
        }
    };
    match &cli_args.command {
        Command::Zoo { what } => match what {
            ZooCmd::List => cli::cmd_zoo(None),
            ZooCmd::Show { name } => cli::cmd_zoo(Some(name)),
        },
        Command::Simulate(args) => {
            let merged = cli::merge_args(args, load("simulate")?)?;
            cli::cmd_simulate(&merged)
        }
        Command::Synthesize(args) => {
            let merged = cli::merge_args(args, load("synthesize")?)?;
            cli::cmd_synthesize(&merged)
        }
        Command::ClfVerify(args) => {
            let merged = cli::merge_args(args, load("clf-verify")?)?;
            cli::cmd_clf_verify(&merged, strict)
        }
        Command::CheckBrockett(args) => {
            let merged = cli::merge_args(args, load("check-brockett")?)?;
            cli::cmd_check_brockett(&merged, strict)
        }
        Command::BrockettLinear(args) => {
            let merged = cli::merge_args(args, load("brockett-linear")?)?;
            cli::cmd_brockett_linear(&merged)
        }
        Command::IssFit(args) => {
            let merged = cli::merge_args(args, load("iss-fit")?)?;
            cli::cmd_iss_fit(&merged)
        }
        Command::LyapVerify(args) => {
            let merged = cli::merge_args(args, load("lyap-verify")?)?;
            cli::cmd_lyap_verify(&merged, strict)
        }
        Command::EnvelopeCheck(args) => {
            let merged = cli::merge_args(args, load("envelope-check")?)?;
            cli::cmd_envelope_check(&merged, strict)
        }
        Command::SweepRobustness(args) => {
            let merged = cli::merge_args(args, load("sweep-robustness")?)?;
            cli::cmd_sweep_robustness(&merged, strict)
        }
    }
}

fn main() -> ExitCode {
    let cli_args = Cli::parse();
    let threads = cli_args.threads.or_else(|| {
        std::env::var("CLFSTAB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global();
    }
    match dispatch(cli_args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            let payload = serde_json::json!({
                "kind": err.kind(),
                "message": err.to_string(),
            });
            eprintln!("{payload}");
            let code = match &err {
                Error::Json(_) => EXIT_VALIDATION,
                other => cli::exit_code_for(other),
            };
            ExitCode::from(code as u8)
        }
    }
}
