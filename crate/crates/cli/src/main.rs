mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes.
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CHECKPOINT: u8 = 3;
pub const EXIT_EVAL: u8 = 4;

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub err: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

pub trait WithCode<T> {
    fn code(self, code: u8) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> CliResult<T> {
        self.map_err(|e| CliError { code, err: e.into() })
    }
}

pub fn fail<T>(code: u8, msg: impl Into<String>) -> CliResult<T> {
    Err(CliError { code, err: anyhow::anyhow!(msg.into()) })
}

#[derive(Parser)]
#[command(name = "hagen", version, about = "Holistic audio generation: mixing, training, sampling, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one stage on a mixed dataset.
    Train(commands::TrainArgs),
    /// Generate audio for every entry of a benchmark manifest.
    Sample(commands::SampleArgs),
    /// Mix a synthetic training dataset.
    Mix(commands::MixArgs),
    /// Build the scenario benchmark.
    Bench(commands::BenchArgs),
    /// Score generated audio against references.
    Eval(commands::EvalArgs),
    /// Finite-difference gradient suites.
    Gradcheck(commands::GradcheckArgs),
    /// Guidance-scale grid over a benchmark.
    Sweep(commands::SweepArgs),
    /// Dump a log-mel spectrogram of a WAV file.
    Mel(commands::MelArgs),
}

/// Shared `--config`; the built-in desk setup when omitted.
#[derive(clap::Args, Clone)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("OMNISONIC_THREADS") {
        let n: usize = match v.trim().parse() {
            Ok(n) if n > 0 => n,
            _ => return fail(EXIT_CONFIG, format!("OMNISONIC_THREADS must be a positive integer, got {v:?}")),
        };
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().code(EXIT_CONFIG)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.cmd {
        Cmd::Train(a) => commands::train(a),
        Cmd::Sample(a) => commands::sample(a),
        Cmd::Mix(a) => commands::mix(a),
        Cmd::Bench(a) => commands::bench(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Gradcheck(a) => commands::gradcheck(a),
        Cmd::Sweep(a) => commands::sweep(a),
        Cmd::Mel(a) => commands::mel(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.err);
            ExitCode::from(e.code)
        }
    }
}
