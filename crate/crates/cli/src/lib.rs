//! Command-line front end: machine and system files in, JSON-lines reports
//! out. The binary is a thin wrapper around [`run`].

pub mod commands;
pub mod format;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use format::ParseError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_CHECK: i32 = 3;
pub const EXIT_IMPOSSIBLE: i32 = 4;

/// Upper bounds for `oracle`.
pub const MAX_TRIALS: usize = 100_000;
pub const MAX_ORACLE_HORIZON: usize = 12;

/// Default depth bound for reachable-belief enumeration in `check`.
pub const DEFAULT_CHECK_DEPTH: usize = 32;

#[derive(Parser, Debug, Clone)]
#[command(name = "markov-machines", version, about = "Exact Bayesian filtering for finite stochastic machines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Filter an observation sequence and print the belief after each step.
    Filter {
        #[arg(long)]
        machine: PathBuf,
        /// Dense prior over states, "p/q,p/q,..."; uniform when omitted.
        #[arg(long)]
        prior: Option<String>,
        /// Comma-separated input labels; may be omitted for a single input.
        #[arg(long)]
        inputs: Option<String>,
        /// Comma-separated output labels; "" is the empty sequence.
        #[arg(long)]
        outputs: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run exact structural checks on a machine file.
    Check {
        #[arg(long)]
        machine: PathBuf,
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Start belief for the reachable-filter interpretation check.
        #[arg(long)]
        prior: Option<String>,
        /// Depth bound for enumerating reachable beliefs.
        #[arg(long, default_value_t = DEFAULT_CHECK_DEPTH)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the filter with the brute-force posterior on random traces.
    Oracle {
        #[arg(long)]
        machine: PathBuf,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long)]
        seed: u64,
        /// Run trials on a thread pool; the report is unchanged.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the controlled process of a comb machine up to a horizon.
    Unroll {
        #[arg(long)]
        machine: PathBuf,
        #[arg(long)]
        prior: Option<String>,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Condition a process file on its first input and output.
    Condition {
        #[arg(long)]
        process: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long)]
        output: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Kalman filter on a system and observation file.
    Kalman {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Filter { out, .. }
            | Command::Check { out, .. }
            | Command::Oracle { out, .. }
            | Command::Unroll { out, .. }
            | Command::Condition { out, .. }
            | Command::Kalman { out, .. } => out.as_ref(),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Comb,
    Unifilar,
    Interpretation,
    Exchangeability,
    All,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] markov_machines::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Usage(_) | CliError::Io { .. } => EXIT_PARSE,
            CliError::Core(markov_machines::Error::ImpossibleObservation { .. }) => EXIT_IMPOSSIBLE,
            CliError::Core(_) => EXIT_CHECK,
        }
    }
}

/// Report text and the exit code it carries. A failed check or an
/// impossible trace still produces a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub output: String,
    pub exit_code: i32,
}

impl Outcome {
    pub fn ok(output: String) -> Outcome {
        Outcome { output, exit_code: EXIT_OK }
    }
}

pub fn read_file(path: &std::path::Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Filter { machine, prior, inputs, outputs, .. } => {
            commands::filter(machine, prior.as_deref(), inputs.as_deref(), outputs)
        }
        Command::Check { machine, suite, prior, horizon, .. } => {
            commands::check(machine, *suite, prior.as_deref(), *horizon)
        }
        Command::Oracle { machine, trials, horizon, seed, parallel, .. } => {
            commands::oracle(machine, *trials, *horizon, *seed, *parallel)
        }
        Command::Unroll { machine, prior, horizon, .. } => commands::unroll(machine, prior.as_deref(), *horizon),
        Command::Condition { process, input, output, .. } => commands::condition(process, input, output),
        Command::Kalman { system, observations, .. } => commands::kalman(system, observations),
    }
}
