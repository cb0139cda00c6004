//! One `manifest.toml` per output directory: the command, its fully resolved
//! configuration, the seed, a start timestamp and the tool version.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub config: toml::Table,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: toml::Table) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            started_unix,
            config,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(self).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Loads a `--config` file: either a plain key-value TOML file or a manifest,
/// in which case its `[config]` table is used.
pub fn load_config_table(path: &Path) -> CliResult<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if table.contains_key("command") {
        match table.remove("config") {
            Some(toml::Value::Table(config)) => return Ok(config),
            _ => return Err(CliError::usage(format!("{}: manifest without [config]", path.display()))),
        }
    }
    Ok(table)
}
