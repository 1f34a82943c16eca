//! State/action trajectory segments and their flattened layout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A horizon of states and actions predicted from one wall-clock time.
///
/// `states` is (H+1) x d_s and `actions` is (H+1) x d_a; row i holds the
/// values for wall-clock step `origin_time + i`. Row 0 is the slot pinned to
/// the measured state during conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    /// Wall-clock step at which row 0 applies.
    pub origin_time: i64,
}

impl Trajectory {
    pub fn new(states: DMatrix<f64>, actions: DMatrix<f64>, origin_time: i64) -> Result<Self> {
        if states.nrows() != actions.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "states have {} rows, actions {}",
                states.nrows(),
                actions.nrows()
            )));
        }
        if states.nrows() == 0 {
            return Err(Error::InvalidArgument("trajectory must have at least one row".into()));
        }
        let t = Self { states, actions, origin_time };
        if !t.is_finite() {
            return Err(Error::Numeric("trajectory contains non-finite entries".into()));
        }
        Ok(t)
    }

    /// All-zero trajectory with the given shape.
    pub fn zeros(rows: usize, d_s: usize, d_a: usize, origin_time: i64) -> Self {
        Self {
            states: DMatrix::zeros(rows, d_s),
            actions: DMatrix::zeros(rows, d_a),
            origin_time,
        }
    }

    /// Number of rows, i.e. H+1 for horizon H.
    pub fn rows(&self) -> usize {
        self.states.nrows()
    }

    /// Horizon H (rows minus one).
    pub fn horizon(&self) -> usize {
        self.rows() - 1
    }

    pub fn d_s(&self) -> usize {
        self.states.ncols()
    }

    pub fn d_a(&self) -> usize {
        self.actions.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite()) && self.actions.iter().all(|v| v.is_finite())
    }

    /// Flattened layout: row-major over timesteps, states before actions
    /// within a timestep, i.e. [s_0, a_0, s_1, a_1, ...]. This ordering is a
    /// compatibility contract shared by checkpoints and the dataset format.
    pub fn flatten(&self) -> DVector<f64> {
        let (rows, d_s, d_a) = (self.rows(), self.d_s(), self.d_a());
        let mut out = DVector::zeros(rows * (d_s + d_a));
        for i in 0..rows {
            let base = i * (d_s + d_a);
            for j in 0..d_s {
                out[base + j] = self.states[(i, j)];
            }
            for j in 0..d_a {
                out[base + d_s + j] = self.actions[(i, j)];
            }
        }
        out
    }

    /// Inverse of [`Trajectory::flatten`] for the given shape.
    pub fn unflatten(flat: &DVector<f64>, rows: usize, d_s: usize, d_a: usize, origin_time: i64) -> Result<Self> {
        if flat.len() != rows * (d_s + d_a) {
            return Err(Error::ShapeMismatch(format!(
                "flat length {} does not match {} rows of {}+{} dims",
                flat.len(),
                rows,
                d_s,
                d_a
            )));
        }
        let mut states = DMatrix::zeros(rows, d_s);
        let mut actions = DMatrix::zeros(rows, d_a);
        for i in 0..rows {
            let base = i * (d_s + d_a);
            for j in 0..d_s {
                states[(i, j)] = flat[base + j];
            }
            for j in 0..d_a {
                actions[(i, j)] = flat[base + d_s + j];
            }
        }
        Ok(Self { states, actions, origin_time })
    }

    /// Squared Euclidean distance over all state and action entries.
    pub fn sq_distance(&self, other: &Trajectory) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.states.iter().zip(other.states.iter()) {
            acc += (a - b) * (a - b);
        }
        for (a, b) in self.actions.iter().zip(other.actions.iter()) {
            acc += (a - b) * (a - b);
        }
        acc
    }

    pub fn state_row(&self, i: usize) -> DVector<f64> {
        self.states.row(i).transpose()
    }

    pub fn action_row(&self, i: usize) -> DVector<f64> {
        self.actions.row(i).transpose()
    }
}
