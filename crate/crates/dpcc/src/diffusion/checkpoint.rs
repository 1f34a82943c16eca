//! Self-contained model container: weights, schedule, normalizer, shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::net::DenoiserNet;
use crate::diffusion::train::TrainConfig;
use crate::normalize::Normalizer;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// Planning window rows (H+1) the net was trained on.
    pub rows: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub train_config: TrainConfig,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_val_step: usize,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                supported: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        let flat = self.rows * (self.d_s + self.d_a);
        if self.net.traj_dim != flat {
            return Err(Error::ShapeMismatch(format!(
                "net trajectory width {} vs rows*(d_s+d_a) = {flat}",
                self.net.traj_dim
            )));
        }
        if self.normalizer.d_s() != self.d_s || self.normalizer.d_a() != self.d_a {
            return Err(Error::ShapeMismatch("normalizer dims disagree with checkpoint dims".into()));
        }
        if self.schedule.k_max() == 0 {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        // Layer chain must be closed: input -> hidden -> traj_dim.
        let mut prev = self.net.traj_dim + self.net.embed_dim;
        for l in &self.net.layers {
            if l.w.ncols() != prev || l.b.len() != l.w.nrows() {
                return Err(Error::ShapeMismatch("net layer sizes do not chain".into()));
            }
            prev = l.w.nrows();
        }
        if prev != self.net.traj_dim {
            return Err(Error::ShapeMismatch("net output width must equal trajectory width".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
