//! Run manifests: enough to rerun a command and check that it reproduced its outputs.

use std::path::Path;

use groupreg::config::RunConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub modality: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<InputRecord>,
    /// Trained extractors the run reused, if any.
    pub extractor: Option<InputRecord>,
    pub outputs: Vec<OutputRecord>,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_sha256: sha256_hex(config.to_toml().as_bytes()),
            inputs: vec![],
            extractor: None,
            outputs: vec![],
            config: config.clone(),
        }
    }

    /// Write `manifest.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Internal(format!("manifest serialisation: {e}")))?;
        crate::commands::write_file(&dir.join("manifest.toml"), text.as_bytes())
    }
}
