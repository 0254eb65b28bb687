//! Service settings from a JSON file, overridden by environment and flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_STORE: &str = "ionlds-store";

/// Every key is optional; unset keys fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub store: Option<PathBuf>,
    pub port: Option<u16>,
    pub host: Option<String>,
    pub log: Option<String>,
    pub workers: Option<usize>,
    pub ui: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::invalid("config", format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AppError::invalid("config", format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub port: u16,
    pub host: String,
    pub log: String,
    pub workers: usize,
    pub ui: Option<PathBuf>,
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// `flags` holds values from the command line or environment; they win
/// over `file`.
pub fn resolve(flags: FileConfig, file: FileConfig) -> ServiceConfig {
    ServiceConfig {
        store: flags
            .store
            .or(file.store)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE)),
        port: flags.port.or(file.port).unwrap_or(DEFAULT_PORT),
        host: flags.host.or(file.host).unwrap_or_else(|| DEFAULT_HOST.to_string()),
        log: flags.log.or(file.log).unwrap_or_else(|| "info".to_string()),
        workers: flags.workers.or(file.workers).unwrap_or_else(default_workers).max(1),
        ui: flags.ui.or(file.ui),
    }
}
