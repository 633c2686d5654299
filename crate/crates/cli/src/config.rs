//! Run configuration: a TOML file, optionally overridden by environment
//! variables and command-line flags.

use std::path::{Path, PathBuf};

use palm_blink::fit::FitConfig;
use palm_blink::spatial_sim::{ProteinLayout, SigmaSampler};
use palm_blink::{BlinkModel, Window};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "PALM_BLINK_SEED";
pub const THREADS_ENV: &str = "PALM_BLINK_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Fit,
    Summaries,
    RefitStudy,
    Moments,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Fit => "fit",
            Mode::Summaries => "summaries",
            Mode::RefitStudy => "refit-study",
            Mode::Moments => "moments",
        }
    }
}

/// Frame length, duration and geometry of a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingConfig {
    /// Seconds per frame.
    pub frame_length: f64,
    /// Recording length b in seconds. Required for simulation; for data it
    /// defaults to the last localization time.
    pub duration: Option<f64>,
    pub window: Window,
    #[serde(default)]
    pub noise_regions: Vec<Window>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub model: BlinkModel,
    pub layout: ProteinLayout,
    pub sigma: SigmaSampler,
    /// Background localizations per nm^2 over the whole recording.
    #[serde(default)]
    pub noise_intensity: f64,
    pub activation_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Localization CSV, relative to the config file.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    /// Largest lag of the exported lag CDF (s).
    #[serde(default = "default_lag_span")]
    pub lag_span: f64,
    #[serde(default = "default_lag_points")]
    pub lag_points: usize,
}

fn default_lag_span() -> f64 {
    60.0
}

fn default_lag_points() -> usize {
    601
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self { lag_span: default_lag_span(), lag_points: default_lag_points() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// If set, the subcommand must match.
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 or absent means one per core.
    pub threads: Option<usize>,
    pub recording: RecordingConfig,
    pub simulation: Option<SimulationConfig>,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub fit: FitConfig,
    pub study: Option<StudyConfig>,
    #[serde(default)]
    pub moments: MomentsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads the file and applies the environment overrides.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.apply_env()?;
        Ok(config)
    }

    fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        if let Ok(v) = std::env::var(THREADS_ENV) {
            let n = v.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}={v:?} is not a count")))?;
            self.threads = Some(n);
        }
        Ok(())
    }

    /// Checks the sections `mode` needs.
    pub fn validate_for(&self, mode: Mode) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Some(m) = self.mode {
            if m != mode {
                return bad(format!("config is for mode {:?} but {:?} was requested", m.name(), mode.name()));
            }
        }
        let rec = &self.recording;
        if !(rec.frame_length.is_finite() && rec.frame_length > 0.0) {
            return bad("recording.frame_length must be positive".into());
        }
        if let Some(b) = rec.duration {
            if !(b.is_finite() && b > 0.0) {
                return bad("recording.duration must be positive".into());
            }
        }
        rec.window.validate().map_err(|e| CliError::Config(format!("recording.window: {e}")))?;
        for (i, w) in rec.noise_regions.iter().enumerate() {
            w.validate().map_err(|e| CliError::Config(format!("recording.noise_regions[{i}]: {e}")))?;
            if w.overlaps(&rec.window) {
                return bad(format!("recording.noise_regions[{i}] overlaps the window"));
            }
        }
        let needs_sim = matches!(mode, Mode::Simulate | Mode::RefitStudy | Mode::Moments);
        if needs_sim {
            let sim = self.simulation.as_ref().ok_or_else(|| CliError::Config("missing [simulation] section".into()))?;
            sim.model.validate().map_err(|e| CliError::Config(format!("simulation.model: {e}")))?;
            if mode != Mode::Moments {
                sim.sigma.validate().map_err(|e| CliError::Config(format!("simulation.sigma: {e}")))?;
                if rec.duration.is_none() {
                    return bad("recording.duration is required for simulation".into());
                }
                if !(sim.noise_intensity.is_finite() && sim.noise_intensity >= 0.0) {
                    return bad("simulation.noise_intensity must be nonnegative".into());
                }
            }
        }
        if matches!(mode, Mode::Fit | Mode::Summaries) && self.data.is_none() {
            return bad("missing [data] section".into());
        }
        if matches!(mode, Mode::Fit | Mode::Summaries | Mode::RefitStudy) {
            self.fit.validate().map_err(|e| CliError::Config(format!("fit: {e}")))?;
        }
        if mode == Mode::RefitStudy {
            let study = self.study.as_ref().ok_or_else(|| CliError::Config("missing [study] section".into()))?;
            if study.replicates < 2 {
                return bad("study.replicates must be at least 2".into());
            }
        }
        if mode == Mode::Moments && !(self.moments.lag_span > 0.0 && self.moments.lag_points >= 2) {
            return bad("moments.lag_span must be positive and lag_points at least 2".into());
        }
        Ok(())
    }

    /// The configuration as recorded in outputs: without the thread count,
    /// which never affects results.
    pub fn echo(&self) -> RunConfig {
        RunConfig { threads: None, ..self.clone() }
    }

    /// SHA-256 of the echoed configuration in canonical JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.echo()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Resolves `path` against the directory of the config file.
pub fn resolve(config_path: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(path)
    }
}
