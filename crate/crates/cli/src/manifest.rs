//! Run manifests: the resolved command, seed, tool version and SHA-256 of
//! every input file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Input files read during a run, in read order.
#[derive(Debug, Default)]
pub struct Inputs(Vec<InputDigest>);

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<String> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.0.push(InputDigest { path: path.to_path_buf(), sha256: digest(text.as_bytes()) });
        Ok(text)
    }
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    /// The full command, replayable with `asreach replay`.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new<T: Serialize>(subcommand: &str, config: &T, seed: Option<u64>, inputs: Inputs) -> Result<Self> {
        Ok(RunManifest {
            tool: "asreach".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            inputs: inputs.0,
            config: serde_json::to_value(config)?,
        })
    }

    /// Fails if an input file changed since the manifest was written.
    pub fn check_inputs(&self) -> Result<()> {
        for i in &self.inputs {
            let bytes = fs::read(&i.path).with_context(|| format!("reading {}", i.path.display()))?;
            if digest(&bytes) != i.sha256 {
                bail!("{} changed since the manifest was written", i.path.display());
            }
        }
        Ok(())
    }
}
