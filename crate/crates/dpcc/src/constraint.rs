//! State and action constraint primitives and per-stage constraint sets.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A single state constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConstraintPrimitive {
    /// a' s <= b over the full state vector (zeros for untouched dims).
    Halfspace { a: DVector<f64>, b: f64 },
    /// Per-dim bounds; use +-infinity to leave a dim unconstrained.
    Box { lower: DVector<f64>, upper: DVector<f64> },
    /// Keep-out disk: ||s[coords] - center|| >= radius.
    AvoidDisk { center: [f64; 2], radius: f64, coords: (usize, usize) },
}

impl ConstraintPrimitive {
    pub fn validate(&self, d_s: usize) -> Result<()> {
        match self {
            Self::Halfspace { a, b } => {
                if a.len() != d_s {
                    return Err(Error::ShapeMismatch(format!("halfspace normal len {} vs d_s {d_s}", a.len())));
                }
                if a.norm() == 0.0 || !b.is_finite() {
                    return Err(Error::InvalidArgument("halfspace needs a nonzero normal and finite offset".into()));
                }
            }
            Self::Box { lower, upper } => {
                if lower.len() != d_s || upper.len() != d_s {
                    return Err(Error::ShapeMismatch("box bounds must match d_s".into()));
                }
                if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
                    return Err(Error::EmptySet("box has lower > upper".into()));
                }
            }
            Self::AvoidDisk { radius, coords, .. } => {
                if coords.0 >= d_s || coords.1 >= d_s || coords.0 == coords.1 {
                    return Err(Error::InvalidArgument("disk coords must be two distinct state dims".into()));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidArgument("disk radius must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// How far the state is outside this constraint (0 when satisfied).
    pub fn violation(&self, s: &DVector<f64>) -> f64 {
        match self {
            Self::Halfspace { a, b } => (a.dot(s) - b).max(0.0),
            Self::Box { lower, upper } => {
                let mut worst: f64 = 0.0;
                for i in 0..s.len() {
                    worst = worst.max(lower[i] - s[i]).max(s[i] - upper[i]);
                }
                worst.max(0.0)
            }
            Self::AvoidDisk { center, radius, coords } => {
                let dx = s[coords.0] - center[0];
                let dy = s[coords.1] - center[1];
                (radius - (dx * dx + dy * dy).sqrt()).max(0.0)
            }
        }
    }
}

/// Per-primitive violation magnitudes of one state against one stage's list.
pub fn violation_report(s: &DVector<f64>, primitives: &[ConstraintPrimitive]) -> Vec<f64> {
    primitives.iter().map(|p| p.violation(s)).collect()
}

/// Constraints over a planning window: one primitive list per step index
/// 0..=H plus a shared action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConstraintSet {
    pub stages: Vec<Vec<ConstraintPrimitive>>,
    pub action_lower: DVector<f64>,
    pub action_upper: DVector<f64>,
}

impl StageConstraintSet {
    pub fn new(
        stages: Vec<Vec<ConstraintPrimitive>>,
        action_lower: DVector<f64>,
        action_upper: DVector<f64>,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArgument("need at least one stage".into()));
        }
        if action_lower.len() != action_upper.len() {
            return Err(Error::ShapeMismatch("action bounds disagree on d_a".into()));
        }
        if action_lower.iter().zip(action_upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::EmptySet("action box has lower > upper".into()));
        }
        Ok(Self { stages, action_lower, action_upper })
    }

    /// Same primitive list at every stage.
    pub fn uniform(
        primitives: Vec<ConstraintPrimitive>,
        rows: usize,
        action_lower: DVector<f64>,
        action_upper: DVector<f64>,
    ) -> Result<Self> {
        Self::new(vec![primitives; rows], action_lower, action_upper)
    }

    pub fn rows(&self) -> usize {
        self.stages.len()
    }

    pub fn d_a(&self) -> usize {
        self.action_lower.len()
    }

    pub fn validate(&self, d_s: usize) -> Result<()> {
        for stage in &self.stages {
            for p in stage {
                p.validate(d_s)?;
            }
        }
        Ok(())
    }

    /// Worst state violation at one stage.
    pub fn stage_violation(&self, stage: usize, s: &DVector<f64>) -> f64 {
        self.stages[stage]
            .iter()
            .map(|p| p.violation(s))
            .fold(0.0, f64::max)
    }

    /// Worst action-box violation.
    pub fn action_violation(&self, a: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..a.len() {
            worst = worst.max(self.action_lower[i] - a[i]).max(a[i] - self.action_upper[i]);
        }
        worst.max(0.0)
    }

    pub fn clamp_action(&self, a: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(a.len(), |i, _| a[i].clamp(self.action_lower[i], self.action_upper[i]))
    }
}
