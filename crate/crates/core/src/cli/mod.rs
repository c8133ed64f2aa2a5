//! The `fedcot` command line.
//!
//! Every subcommand takes the same optional flag set. Values resolve as
//! flag, then `FEDCOT_*` environment variable, then the file given with
//! `--config`. That file is either a plain settings object or a manifest
//! written by an earlier run, in which case its recorded settings are reused.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::pipeline::io::Manifest;

#[derive(Debug, Parser)]
#[command(name = "fedcot", version, about = "Private rationale distillation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Perturb prompts token by token and write them as JSONL.
    Perturb(Settings),
    /// Check the mechanism's privacy bound by exact enumeration.
    VerifyDp(Settings),
    /// Answer rationale requests over TCP.
    Serve(Settings),
    /// Build encoder and decoder datasets from public prompts.
    BuildDatasets(Settings),
    /// Run the client loop over private prompts and write distillation examples.
    Run(Settings),
    /// Measure rationale overlap across privacy budgets.
    Sweep(Settings),
    /// Train the toy student with the multi-task objective.
    DistillToy(Settings),
    /// Write a small synthetic corpus to get started.
    Fixture(Settings),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Perturb(_) => "perturb",
            Command::VerifyDp(_) => "verify-dp",
            Command::Serve(_) => "serve",
            Command::BuildDatasets(_) => "build-datasets",
            Command::Run(_) => "run",
            Command::Sweep(_) => "sweep",
            Command::DistillToy(_) => "distill-toy",
            Command::Fixture(_) => "fixture",
        }
    }

    fn settings(&self) -> &Settings {
        match self {
            Command::Perturb(s)
            | Command::VerifyDp(s)
            | Command::Serve(s)
            | Command::BuildDatasets(s)
            | Command::Run(s)
            | Command::Sweep(s)
            | Command::DistillToy(s)
            | Command::Fixture(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic template generator, called in process.
    Mock,
    /// Chat-completions endpoint given by --endpoint.
    Http,
    /// The mock behind a TCP server on 127.0.0.1, reached over a real socket.
    Loopback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Identity,
    Repair,
    Icl,
}

/// Flag set shared by all subcommands. Everything is optional here; each
/// command checks what it needs.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Embedding file, one `word v1 v2 ...` row per line
    #[arg(long, env = "FEDCOT_EMBEDDINGS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,

    /// Prompt file, one whitespace-tokenized prompt per line
    #[arg(long, env = "FEDCOT_PROMPTS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,

    /// Label file, one label per line, aligned with --prompts
    #[arg(long, env = "FEDCOT_LABELS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,

    /// Per-token privacy budget
    #[arg(long, env = "FEDCOT_EPSILON", allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,

    /// Comma-separated budgets for `sweep`
    #[arg(long, env = "FEDCOT_EPSILONS", value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,

    /// Cap for importance-weighted budgets; enables adaptive allocation
    #[arg(long, env = "FEDCOT_ADAPTIVE_CAP")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptive_cap: Option<f64>,

    /// Base seed for every random choice
    #[arg(long, env = "FEDCOT_SEED")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Rationale generator
    #[arg(long, env = "FEDCOT_BACKEND", value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendKind>,

    /// URL of the chat-completions endpoint for --backend http
    #[arg(long, env = "FEDCOT_ENDPOINT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,

    /// Model name sent to the HTTP endpoint
    #[arg(long, env = "FEDCOT_MODEL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,

    /// Name of the environment variable holding the API key
    #[arg(long, env = "FEDCOT_API_KEY_ENV")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,

    /// Server address: bind address for `serve`, remote server otherwise
    #[arg(long, env = "FEDCOT_ADDR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,

    /// Per-request deadline in milliseconds
    #[arg(long, env = "FEDCOT_DEADLINE_MS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<u64>,

    /// Output directory
    #[arg(long, env = "FEDCOT_OUT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,

    /// Worker threads; defaults to one per core
    #[arg(long, env = "FEDCOT_PARALLELISM")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,

    /// Rationale decoder for `run` and `sweep`
    #[arg(long, env = "FEDCOT_DECODER", value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderKind>,

    /// Public decoder examples (JSONL) used as in-context demonstrations
    #[arg(long, env = "FEDCOT_DEMOS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demos: Option<PathBuf>,

    /// Number of demonstrations per in-context query
    #[arg(long, env = "FEDCOT_K_DEMOS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_demos: Option<usize>,

    /// Task tag sent with each request
    #[arg(long, env = "FEDCOT_TASK")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,

    /// Distillation examples (JSONL) for `distill-toy`
    #[arg(long, env = "FEDCOT_DATASET")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,

    #[arg(long, env = "FEDCOT_EPOCHS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,

    #[arg(long, env = "FEDCOT_LEARNING_RATE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,

    /// Settings file or manifest to fill in anything not given above
    #[arg(long, env = "FEDCOT_CONFIG")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

macro_rules! fill {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl Settings {
    /// Take every field that is unset here from `lower`.
    pub fn or(mut self, lower: Settings) -> Settings {
        fill!(self, lower;
            embeddings, prompts, labels, epsilon, epsilons, adaptive_cap, seed,
            backend, endpoint, model, api_key_env, addr, deadline_ms, out,
            parallelism, decoder, demos, k_demos, task, dataset, epochs,
            learning_rate,
        );
        self
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing input from the user. Exit code 1.
    Invalid(String),
    /// Anything that failed while doing the work. Exit code 2.
    Runtime(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

/// Settings from a `--config` file. A manifest contributes its recorded
/// settings, and only to the command that wrote it.
fn load_config_file(path: &PathBuf, command: &str) -> Result<Settings, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| invalid(format!("--config: cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("--config: {} is not JSON: {e}", path.display())))?;
    let settings = if value.get("tool").is_some() && value.get("command").is_some() {
        let manifest: Manifest = serde_json::from_value(value)
            .map_err(|e| invalid(format!("--config: bad manifest {}: {e}", path.display())))?;
        if manifest.command != command {
            return Err(invalid(format!(
                "--config: manifest was written by `{}`, not `{command}`",
                manifest.command
            )));
        }
        manifest.config
    } else {
        value
    };
    serde_json::from_value(settings).map_err(|e| invalid(format!("--config: {e}")))
}

/// Resolve settings and run one parsed command.
pub fn execute(command: Command) -> Result<(), CliError> {
    let name = command.name();
    let given = command.settings().clone();
    let settings = match &given.config {
        Some(path) => given.clone().or(load_config_file(path, name)?),
        None => given,
    };
    match settings.parallelism {
        Some(0) => Err(invalid("--parallelism must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| commands::dispatch(name, settings))
        }
        None => commands::dispatch(name, settings),
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
