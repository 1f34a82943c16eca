//! Demonstration storage: in-memory types and the JSON-lines format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// One expert rollout in raw units. `states` has one row per step including
/// the final state; `actions` has the same row count (the last action is the
/// expert's command at the final state, recorded for uniform windowing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub route_label: String,
    pub seed: u64,
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn d_s(&self) -> usize {
        self.states.ncols()
    }

    pub fn d_a(&self) -> usize {
        self.actions.ncols()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DemoRecord {
    schema_version: u32,
    route_label: String,
    seed: u64,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn new(demos: Vec<Demonstration>) -> Self {
        Self { demos }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// One demonstration per line, each carrying the schema version.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for d in &self.demos {
            let rec = DemoRecord {
                schema_version: DATASET_SCHEMA_VERSION,
                route_label: d.route_label.clone(),
                seed: d.seed,
                states: matrix_rows(&d.states),
                actions: matrix_rows(&d.actions),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut demos = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DemoRecord = serde_json::from_str(&line)?;
            if rec.schema_version != DATASET_SCHEMA_VERSION {
                return Err(Error::SchemaVersion {
                    found: rec.schema_version,
                    supported: DATASET_SCHEMA_VERSION,
                });
            }
            let states = rows_matrix(&rec.states)
                .ok_or_else(|| Error::Config(format!("line {}: ragged states", ln + 1)))?;
            let actions = rows_matrix(&rec.actions)
                .ok_or_else(|| Error::Config(format!("line {}: ragged actions", ln + 1)))?;
            if states.nrows() != actions.nrows() {
                return Err(Error::Config(format!("line {}: states/actions row mismatch", ln + 1)));
            }
            demos.push(Demonstration { route_label: rec.route_label, seed: rec.seed, states, actions });
        }
        Ok(Self { demos })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nr = rows.len();
    if nr == 0 {
        return None;
    }
    let nc = rows[0].len();
    if rows.iter().any(|r| r.len() != nc) {
        return None;
    }
    Some(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
}
