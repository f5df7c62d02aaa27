//! `traceguard`: poison reasoning corpora, simulate logit perturbations,
//! check detectability bounds, solve finite poisoning games and aggregate
//! removal reports.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Process exit status with its category.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 1,
            error: error.into(),
        }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            error: error.into(),
        }
    }

    pub fn constraint(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 3,
            error: error.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "traceguard",
    version,
    about = "Reasoning-trace poisoning toolkit"
)]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, env = "TRACEGUARD_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Remove sentences from every trace of a JSONL corpus.
    Poison(PoisonArgs),
    /// Perturb logits inside the sparse Gaussian constraint set and resample.
    Gaussian(GaussianArgs),
    /// Monte Carlo estimate of the expected KL under Gaussian logit noise.
    Detect(DetectArgs),
    /// Finite Stackelberg poisoning games.
    Game {
        #[command(subcommand)]
        command: GameCommand,
    },
    /// Aggregate poison reports into a CSV table.
    Report(ReportArgs),
    #[command(hide = true)]
    Synth(SynthArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Traceguard,
    Random,
}

#[derive(Args, Debug)]
pub struct PoisonArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Traceguard)]
    pub method: Method,
    /// Removal budget per trace.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Marker file, one marker per line, `#` for comments.
    #[arg(long)]
    pub markers: Option<PathBuf>,
    #[arg(long)]
    pub case_sensitive: bool,
    /// With `--method random`, remove as many sentences as TraceGuard would.
    #[arg(long)]
    pub match_traceguard: bool,
    /// Worker threads; 0 picks the number of CPUs.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    TotalNorm,
    PerCoordinate,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Sample,
    Greedy,
}

#[derive(Args, Debug)]
pub struct GaussianArgs {
    /// Logit table: a `V=<n>` header then one row of logits per position.
    #[arg(long, conflicts_with_all = ["vocab", "len"])]
    pub table: Option<PathBuf>,
    /// Vocabulary of the generated Markov teacher.
    #[arg(long, default_value_t = 8)]
    pub vocab: usize,
    /// Sequence length of the generated table.
    #[arg(long, default_value_t = 32)]
    pub len: usize,
    #[arg(long)]
    pub eta: f64,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub sigma2: f64,
    #[arg(long, value_enum, default_value_t = Convention::TotalNorm)]
    pub convention: Convention,
    /// Positions that are never perturbed, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub protected: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ResampleMode::Sample)]
    pub resampling: ResampleMode,
    /// Masks drawn when estimating the flip rate.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 10)]
    pub vocab: usize,
    /// Perturbed positions; the bound scales with this count.
    #[arg(long, default_value_t = 1)]
    pub positions: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = Convention::TotalNorm)]
    pub convention: Convention,
    /// Explicit logits for a single position, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with_all = ["vocab", "positions"])]
    pub logits: Option<Vec<f64>>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Robust,
    Poison,
    Bayes,
}

#[derive(Subcommand, Debug)]
pub enum GameCommand {
    /// Defender's optimal perturbation under one objective.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Robust)]
        mode: Mode,
        /// Attacker class for `--mode poison`.
        #[arg(long, required_if_eq("mode", "poison"))]
        class: Option<String>,
    },
    /// Compare the robust value with its Bayesian relaxation.
    Relax {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Gap between poisoning the union class and the robust value.
    Memorize {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Attacker's best response in one class to one perturbation.
    BestResponse {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        perturbation: String,
    },
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Poisoned corpora carrying reports.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Emit the per-trace TraceGuard versus random table instead.
    #[arg(long)]
    pub compare: bool,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub traces: usize,
    #[arg(long, default_value_t = 4)]
    pub min_sentences: usize,
    #[arg(long, default_value_t = 40)]
    pub max_sentences: usize,
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
