//! Declarative experiment description, stored as TOML. Every field has a
//! desk-scale default, so a config file only needs to state what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::Method;
use crate::diffusion::TrainConfig;
use crate::env::EnvConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Demonstrations generated per corpus; must be a multiple of the
    /// environment's route count so routes stay balanced.
    pub demo_count: usize,
    pub demo_seed: u64,
    /// Methods in the evaluation grid. An empty list is legal and yields an
    /// empty table.
    pub methods: Vec<Method>,
    /// Whether constraint-handling methods run with a tightened margin.
    pub tightening: bool,
    /// One trained model per seed; evaluation averages over all of them.
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
    /// Planner step-length scales swept by the mismatch ablation.
    pub mismatch_factors: Vec<f64>,
    /// Candidate plans per control step.
    pub batch: usize,
    /// Gradient-guidance weight.
    pub lambda: f64,
    /// Fixed tightening margin in normalized units. Leave unset to estimate
    /// it from fresh expert rollouts instead.
    pub margin: Option<f64>,
    /// Inflation applied to the measured model error when estimating.
    pub gamma_safety: f64,
    /// Rollouts used for the estimate (rounded up to a route multiple).
    pub gamma_rollouts: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            demo_count: 96,
            demo_seed: 0,
            methods: Method::all().to_vec(),
            tightening: true,
            train_seeds: vec![0, 1, 2],
            test_seeds: vec![0, 1, 2, 3, 4],
            mismatch_factors: vec![0.25, 1.0, 4.0],
            batch: 4,
            lambda: 1.0,
            margin: None,
            gamma_safety: 1.1,
            gamma_rollouts: 96,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.demo_count == 0 {
            return Err(Error::Config("demo_count must be positive".into()));
        }
        if self.train_seeds.is_empty() || self.test_seeds.is_empty() {
            return Err(Error::Config("train_seeds and test_seeds must be non-empty".into()));
        }
        let mut seen = self.train_seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.train_seeds.len() {
            return Err(Error::Config("duplicate train seeds would share a checkpoint file".into()));
        }
        if self.mismatch_factors.is_empty()
            || self.mismatch_factors.iter().any(|f| !f.is_finite() || *f <= 0.0)
        {
            return Err(Error::Config("mismatch_factors must be finite and positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if let Some(m) = self.margin {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::Config("margin must be finite and >= 0".into()));
            }
        }
        if !self.gamma_safety.is_finite() || self.gamma_safety < 1.0 {
            return Err(Error::Config("gamma_safety must be finite and >= 1".into()));
        }
        if self.gamma_rollouts == 0 {
            return Err(Error::Config("gamma_rollouts must be positive".into()));
        }
        if self.train.rows < 2 {
            return Err(Error::Config("planning window needs at least 2 rows".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Where a data directory keeps its demonstration corpus.
pub fn demos_path(dir: &Path) -> PathBuf {
    dir.join("demos.jsonl")
}

/// Where a data directory keeps the model trained under `train_seed`.
pub fn checkpoint_path(dir: &Path, train_seed: u64) -> PathBuf {
    dir.join(format!("ckpt-seed{train_seed}.json"))
}
