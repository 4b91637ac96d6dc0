//! Library half of the `sam` binary: config loading, subcommand drivers,
//! plots and reports. Kept separate from `main.rs` so it can be tested.

pub mod commands;
pub mod plot;

use std::fmt;
use std::fs;
use std::path::Path;

use sam_core::harness::ExperimentConfig;
use sam_core::SamError;

/// Exit code for invalid configuration or command-line usage.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for failures while running (data, I/O, numerics).
pub const EXIT_RUNTIME: i32 = 3;
/// Exit code when an experiment finished but one of its checks failed.
pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Acceptance(_) => EXIT_ACCEPTANCE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Acceptance(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<SamError> for CliError {
    fn from(e: SamError) -> Self {
        match e {
            SamError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Defaults, then the config file (if any), then `key=value` overrides, then
/// validation.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
        cfg.apply_kv_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", p.display(), message(e))))?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn message(e: SamError) -> String {
    match e {
        SamError::Config(m) => m,
        other => other.to_string(),
    }
}

/// Parses `"0,1,2"`.
pub fn parse_seed_list(s: &str) -> CliResult<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("--seed-list: `{t}` is not a seed")))
        })
        .collect::<CliResult<_>>()?;
    if seeds.is_empty() {
        return Err(CliError::Config("--seed-list is empty".into()));
    }
    Ok(seeds)
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
