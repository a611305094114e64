//! JSON config documents for the CLI. Unknown keys are rejected everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};
use crate::forward::NoiseModel;
use crate::gradient::LossSpec;
use crate::optics::SystemConfig;
use crate::optimizer::OptimizerSpec;
use crate::reconstruct::RunMethod;

/// Input for `fpm simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub system: SystemConfig,
    /// Noise applied to the synthetic planes; the seed field is overridden by
    /// the CLI seed.
    #[serde(default)]
    pub noise: Option<NoiseModel>,
    /// True sample-to-focal-plane distance baked into the data, um.
    #[serde(default)]
    pub defocus_um: f64,
    /// When set, per-LED intensity factors are drawn uniformly from this
    /// range instead of being exactly 1.
    #[serde(default)]
    pub gamma_range: Option<[f64; 2]>,
    /// Per-plane exposure multipliers; length must equal the LED count.
    #[serde(default)]
    pub exposures: Option<Vec<f64>>,
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        if let Some([lo, hi]) = self.gamma_range {
            if !(lo > 0.0 && hi >= lo) {
                return Err(FpmError::Config(format!(
                    "gamma_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        if let Some(e) = &self.exposures {
            let n = self.system.grid_side * self.system.grid_side;
            if e.len() != n {
                return Err(FpmError::Config(format!(
                    "expected {n} exposures, got {}",
                    e.len()
                )));
            }
            if e.iter().any(|&x| !(x > 0.0)) {
                return Err(FpmError::Config("exposures must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Optional overrides for `fpm reconstruct`, loaded from a JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructOverrides {
    #[serde(default)]
    pub optimizer: Option<OptimizerSpec>,
    #[serde(default)]
    pub loss: Option<LossSpec>,
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
}

/// One run of a benchmark sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRun {
    pub label: String,
    pub method: RunMethod,
}

/// Input for `fpm benchmark`: several methods on one synthetic scene,
/// repeated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
    /// Seed for the synthetic ground truth.
    #[serde(default)]
    pub truth_seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        if self.epochs == 0 || self.seeds.is_empty() || self.runs.is_empty() {
            return Err(FpmError::Config(
                "sweep needs epochs >= 1, at least one seed and one run".into(),
            ));
        }
        let mut labels: Vec<&str> = self.runs.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.runs.len() {
            return Err(FpmError::Config("sweep run labels must be unique".into()));
        }
        Ok(())
    }
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
