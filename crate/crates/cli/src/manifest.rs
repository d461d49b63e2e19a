//! The manifest written next to every command's outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub preset: Option<String>,
    pub out_dir: String,
    pub master_seed: u64,
    pub version: &'static str,
    /// SHA-256 of the effective configuration (file plus overrides) as JSON.
    pub config_hash: String,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path, master_seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_path: None,
            preset: None,
            out_dir: out_dir.display().to_string(),
            master_seed,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: config_hash(config)?,
            outputs: Vec::new(),
            converged: None,
            warning: None,
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
