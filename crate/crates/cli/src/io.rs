use std::fs;
use std::path::Path;

use dpf_core::scheduler::SchedulerError;
use dpf_core::semantics::SemanticsError;
use dpf_core::sim::SimError;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("audit failure: {0}")]
    Audit(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Audit(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Audit { .. } => CliError::Audit(e.to_string()),
            SimError::Config(_)
            | SimError::Scheduler(SchedulerError::Config(_))
            | SimError::Semantics(SemanticsError::Config(_) | SemanticsError::Counter(_)) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display()))
}

/// Reads a JSON document, reporting the failing field path on error.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Config(format!(
            "{}: at `{}`: {}",
            path.display(),
            e.path(),
            e.inner()
        ))
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
