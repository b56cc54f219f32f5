//! Run manifests: everything needed to replay a run bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Fully resolved configuration.
    pub config: RunConfig,
    /// SHA-256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each artifact, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub converged: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Input files named by a configuration, in a stable order.
pub fn input_paths(cfg: &RunConfig) -> Vec<&Path> {
    cfg.input.iter().map(|p| p.as_path()).chain(cfg.csv_sets.values().map(|p| p.as_path())).collect()
}

pub fn hash_inputs(cfg: &RunConfig) -> CliResult<BTreeMap<String, String>> {
    input_paths(cfg).into_iter().map(|p| Ok((p.display().to_string(), hash_file(p)?))).collect()
}

impl Manifest {
    /// Fails when an input file no longer matches its recorded hash.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for (path, want) in &self.inputs {
            let got = hash_file(Path::new(path))?;
            if &got != want {
                return Err(CliError::input(format!("input {path} changed since the recorded run (sha256 {got}, expected {want})")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}
