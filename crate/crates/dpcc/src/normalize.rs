//! Per-dimension limit normalization of trajectories and constraint sets.
//!
//! Raw values map to [-1, 1] via x_n = 2(x - lower)/(upper - lower) - 1.
//! Dimensions listed in a shared group (the two coordinates of a position
//! pair) are fitted to one scale so that disks stay disks under the map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintPrimitive, StageConstraintSet};
use crate::traj::Trajectory;
use crate::{Error, Result};

const MIN_RANGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_lower: DVector<f64>,
    pub state_upper: DVector<f64>,
    pub action_lower: DVector<f64>,
    pub action_upper: DVector<f64>,
}

fn check_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<()> {
    if lower.len() != upper.len() {
        return Err(Error::ShapeMismatch("bound vectors disagree".into()));
    }
    for i in 0..lower.len() {
        if !(lower[i].is_finite() && upper[i].is_finite()) || upper[i] - lower[i] < 0.5 * MIN_RANGE {
            return Err(Error::InvalidArgument(format!(
                "dim {i}: bounds [{}, {}] invalid or narrower than {MIN_RANGE}",
                lower[i], upper[i]
            )));
        }
    }
    Ok(())
}

fn scale_mid(lower: f64, upper: f64) -> (f64, f64) {
    ((upper - lower) / 2.0, (upper + lower) / 2.0)
}

impl Normalizer {
    pub fn from_bounds(
        state_lower: DVector<f64>,
        state_upper: DVector<f64>,
        action_lower: DVector<f64>,
        action_upper: DVector<f64>,
    ) -> Result<Self> {
        check_bounds(&state_lower, &state_upper)?;
        check_bounds(&action_lower, &action_upper)?;
        Ok(Self { state_lower, state_upper, action_lower, action_upper })
    }

    /// Fits bounds from raw demonstration data. `shared_state_groups` lists
    /// index groups forced to one scale (position coordinate pairs).
    /// Degenerate dimensions are padded to a minimal range.
    pub fn fit<'a, I>(data: I, d_s: usize, d_a: usize, shared_state_groups: &[Vec<usize>]) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a DMatrix<f64>, &'a DMatrix<f64>)>,
    {
        let mut s_lo = DVector::from_element(d_s, f64::INFINITY);
        let mut s_hi = DVector::from_element(d_s, f64::NEG_INFINITY);
        let mut a_lo = DVector::from_element(d_a, f64::INFINITY);
        let mut a_hi = DVector::from_element(d_a, f64::NEG_INFINITY);
        let mut any = false;
        for (states, actions) in data {
            if states.ncols() != d_s || actions.ncols() != d_a {
                return Err(Error::ShapeMismatch("fit data dims disagree with d_s/d_a".into()));
            }
            any = true;
            for r in 0..states.nrows() {
                for c in 0..d_s {
                    s_lo[c] = s_lo[c].min(states[(r, c)]);
                    s_hi[c] = s_hi[c].max(states[(r, c)]);
                }
            }
            for r in 0..actions.nrows() {
                for c in 0..d_a {
                    a_lo[c] = a_lo[c].min(actions[(r, c)]);
                    a_hi[c] = a_hi[c].max(actions[(r, c)]);
                }
            }
        }
        if !any {
            return Err(Error::InvalidArgument("cannot fit a normalizer on empty data".into()));
        }
        for group in shared_state_groups {
            let lo = group.iter().map(|&i| s_lo[i]).fold(f64::INFINITY, f64::min);
            let hi = group.iter().map(|&i| s_hi[i]).fold(f64::NEG_INFINITY, f64::max);
            for &i in group {
                if i >= d_s {
                    return Err(Error::InvalidArgument(format!("shared group index {i} out of range")));
                }
                s_lo[i] = lo;
                s_hi[i] = hi;
            }
        }
        for v in [(&mut s_lo, &mut s_hi), (&mut a_lo, &mut a_hi)] {
            for i in 0..v.0.len() {
                if v.1[i] - v.0[i] < MIN_RANGE {
                    v.1[i] = v.0[i] + MIN_RANGE;
                }
            }
        }
        Self::from_bounds(s_lo, s_hi, a_lo, a_hi)
    }

    pub fn d_s(&self) -> usize {
        self.state_lower.len()
    }

    pub fn d_a(&self) -> usize {
        self.action_lower.len()
    }

    /// (half-range, midpoint) of a state dim.
    pub fn state_scale(&self, i: usize) -> (f64, f64) {
        scale_mid(self.state_lower[i], self.state_upper[i])
    }

    /// (half-range, midpoint) of an action dim.
    pub fn action_scale(&self, i: usize) -> (f64, f64) {
        scale_mid(self.action_lower[i], self.action_upper[i])
    }

    pub fn normalize_state(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(s.len(), |i, _| {
            let (c, m) = self.state_scale(i);
            (s[i] - m) / c
        })
    }

    pub fn denormalize_state(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(s.len(), |i, _| {
            let (c, m) = self.state_scale(i);
            s[i] * c + m
        })
    }

    pub fn normalize_action(&self, a: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(a.len(), |i, _| {
            let (c, m) = self.action_scale(i);
            (a[i] - m) / c
        })
    }

    pub fn denormalize_action(&self, a: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(a.len(), |i, _| {
            let (c, m) = self.action_scale(i);
            a[i] * c + m
        })
    }

    pub fn normalize_traj(&self, t: &Trajectory) -> Trajectory {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for c in 0..t.d_s() {
                let (sc, m) = self.state_scale(c);
                out.states[(r, c)] = (t.states[(r, c)] - m) / sc;
            }
            for c in 0..t.d_a() {
                let (sc, m) = self.action_scale(c);
                out.actions[(r, c)] = (t.actions[(r, c)] - m) / sc;
            }
        }
        out
    }

    pub fn denormalize_traj(&self, t: &Trajectory) -> Trajectory {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for c in 0..t.d_s() {
                let (sc, m) = self.state_scale(c);
                out.states[(r, c)] = t.states[(r, c)] * sc + m;
            }
            for c in 0..t.d_a() {
                let (sc, m) = self.action_scale(c);
                out.actions[(r, c)] = t.actions[(r, c)] * sc + m;
            }
        }
        out
    }

    /// Maps one raw-unit state constraint into normalized coordinates so that
    /// membership is preserved exactly: s in S  <=>  normalize(s) in S_n.
    pub fn normalize_primitive(&self, p: &ConstraintPrimitive) -> Result<ConstraintPrimitive> {
        match p {
            ConstraintPrimitive::Halfspace { a, b } => {
                // a's + b on raw s = (C x + m): (C a)' x <= b - a'm.
                let mut a_n = a.clone();
                let mut b_n = *b;
                for i in 0..a.len() {
                    let (c, m) = self.state_scale(i);
                    a_n[i] = a[i] * c;
                    b_n -= a[i] * m;
                }
                Ok(ConstraintPrimitive::Halfspace { a: a_n, b: b_n })
            }
            ConstraintPrimitive::Box { lower, upper } => {
                let map = |v: &DVector<f64>| {
                    DVector::from_fn(v.len(), |i, _| {
                        if v[i].is_finite() {
                            let (c, m) = self.state_scale(i);
                            (v[i] - m) / c
                        } else {
                            v[i]
                        }
                    })
                };
                Ok(ConstraintPrimitive::Box { lower: map(lower), upper: map(upper) })
            }
            ConstraintPrimitive::AvoidDisk { center, radius, coords } => {
                let (cx, mx) = self.state_scale(coords.0);
                let (cy, my) = self.state_scale(coords.1);
                if (cx - cy).abs() > 1e-12 * cx.abs().max(cy.abs()) {
                    return Err(Error::InvalidArgument(format!(
                        "disk coords ({}, {}) have different scales; fit them as a shared group",
                        coords.0, coords.1
                    )));
                }
                Ok(ConstraintPrimitive::AvoidDisk {
                    center: [(center[0] - mx) / cx, (center[1] - my) / cy],
                    radius: radius / cx,
                    coords: *coords,
                })
            }
        }
    }

    /// Maps a whole stage set (state constraints and action box) into
    /// normalized coordinates.
    pub fn normalize_constraints(&self, set: &StageConstraintSet) -> Result<StageConstraintSet> {
        let mut stages = Vec::with_capacity(set.rows());
        for stage in &set.stages {
            stages.push(stage.iter().map(|p| self.normalize_primitive(p)).collect::<Result<Vec<_>>>()?);
        }
        StageConstraintSet::new(
            stages,
            self.normalize_action(&set.action_lower),
            self.normalize_action(&set.action_upper),
        )
    }
}
