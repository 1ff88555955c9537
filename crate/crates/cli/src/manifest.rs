//! Run manifest: enough provenance to re-run a config byte for byte and to
//! re-verify its trajectories without the original target factors.
//!
//! The config hash is a SHA-256 over the serialized config value;
//! serialization sorts object keys, so the hash is stable under key order
//! and whitespace in the source file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use linflow::model::RunEnd;

use crate::config::ExperimentConfig;
use crate::report::CheckOutcome;
use crate::CliError;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub seeds: SeedTrail,
    pub wall_time_ms: u64,
    /// What a later `verify` needs to rebuild the checks: bound parameters
    /// depend only on the singular values, the depth, and the recorded
    /// samples themselves.
    pub context: RunContext,
    pub runs: Vec<RunRecord>,
    pub checks: Vec<CheckOutcome>,
    pub files: Vec<String>,
}

/// Seeds that fed the run, by purpose.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedTrail {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunContext {
    pub depth: usize,
    pub d_y: usize,
    pub d_x: usize,
    pub sv: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    /// `flow` or `gd`.
    pub kind: String,
    pub end: RunEnd,
    pub steps: usize,
    pub samples: usize,
}

/// Canonical hash of a config: `sha256:<hex>`.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    let canon = serde_json::to_string(&value).expect("value serializes");
    let digest = Sha256::digest(canon.as_bytes());
    let mut hex = String::with_capacity(7 + 64);
    hex.push_str("sha256:");
    for byte in digest {
        use std::fmt::Write as _;
        write!(hex, "{byte:02x}").expect("string write");
    }
    hex
}

pub fn read_manifest(path: &std::path::Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format(format!("manifest: {e}")))
}
