//! JSON documents and curve CSVs written by the commands.

use std::collections::BTreeMap;
use std::path::Path;

use palm_blink::fit::{Diagnostics, FitFailure, FitResult, FitStage};
use palm_blink::kinetics::GroundTruth;
use palm_blink::{BlinkModel, Error};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::table::ReadReport;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Fields shared by every JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub trim_start: Option<f64>,
}

impl Header {
    pub fn new(command: &str, config: &RunConfig, trim_start: Option<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            config_hash: config.hash(),
            trim_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureDoc {
    pub stage: FitStage,
    pub error: Error,
    pub diagnostics: Diagnostics,
}

impl From<FitFailure> for FailureDoc {
    fn from(f: FitFailure) -> Self {
        Self { stage: f.stage, error: f.error, diagnostics: *f.partial }
    }
}

/// Output of `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    #[serde(flatten)]
    pub header: Header,
    pub config: RunConfig,
    pub input_sha256: String,
    pub input: ReadReport,
    pub result: Option<FitResult>,
    pub failure: Option<FailureDoc>,
}

/// Output of `simulate` next to the localization table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDocument {
    #[serde(flatten)]
    pub header: Header,
    pub model: BlinkModel,
    pub descriptors: GroundTruth,
    pub proteins: Vec<[f64; 2]>,
    /// Protein index per table row, -1 for background.
    pub membership: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub avg: f64,
    /// Sample standard deviation; absent with fewer than 2 values.
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub stage: FitStage,
    pub error: Error,
}

/// Output of `refit-study`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    #[serde(flatten)]
    pub header: Header,
    pub model: BlinkModel,
    pub truth: GroundTruth,
    pub replicates: usize,
    pub used: usize,
    pub failed: usize,
    pub failures: Vec<ReplicateFailure>,
    pub parameters: BTreeMap<String, Spread>,
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(format!("serializing: {e}")))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

/// Two-column CSV `x,value`.
pub fn write_curve(path: &Path, x_name: &str, xs: &[f64], values: &[f64]) -> Result<(), CliError> {
    let mut text = format!("{x_name},value\n");
    for (x, v) in xs.iter().zip(values) {
        text.push_str(&format!("{x},{v}\n"));
    }
    write_file(path, text.as_bytes())
}
