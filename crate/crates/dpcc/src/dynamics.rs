//! Nominal prediction models used by the projections.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::normalize::Normalizer;
use crate::{Error, Result};

/// Euler model in raw units: s' = s + tile(a) * t_s.
///
/// The action is tiled across the state, so d_s must be a multiple of d_a.
/// For the point-mass state [position; desired position] both halves
/// integrate the same commanded velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalDynamics {
    pub d_s: usize,
    pub d_a: usize,
    pub t_s: f64,
}

impl NominalDynamics {
    pub fn new(d_s: usize, d_a: usize, t_s: f64) -> Result<Self> {
        if d_a == 0 || d_s == 0 || d_s % d_a != 0 {
            return Err(Error::InvalidArgument(format!(
                "state dim {d_s} must be a positive multiple of action dim {d_a}"
            )));
        }
        if !(t_s > 0.0 && t_s.is_finite()) {
            return Err(Error::InvalidArgument("sampling time must be positive".into()));
        }
        Ok(Self { d_s, d_a, t_s })
    }

    pub fn step(&self, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(s.len(), self.d_s);
        debug_assert_eq!(a.len(), self.d_a);
        let mut next = s.clone();
        for i in 0..self.d_s {
            next[i] += a[i % self.d_a] * self.t_s;
        }
        next
    }

    /// The same model expressed in normalized coordinates, optionally with a
    /// scaled sampling time (model-mismatch studies scale only this copy).
    pub fn to_affine(&self, normalizer: Option<&Normalizer>, t_s_scale: f64) -> AffineStageDynamics {
        let ts = self.t_s * t_s_scale;
        let mut b = DMatrix::zeros(self.d_s, self.d_a);
        let mut offset = DVector::zeros(self.d_s);
        match normalizer {
            None => {
                for i in 0..self.d_s {
                    b[(i, i % self.d_a)] = ts;
                }
            }
            Some(n) => {
                // Raw: s'_i = s_i + a_j * ts. With per-dim affine maps
                // x = (s - m)/c and y = (a - m_a)/c_a this becomes
                // x'_i = x_i + (c_a_j / c_i) ts y_j + (m_a_j / c_i) ts.
                for i in 0..self.d_s {
                    let j = i % self.d_a;
                    let (c_s, _) = n.state_scale(i);
                    let (c_a, m_a) = n.action_scale(j);
                    b[(i, j)] = ts * c_a / c_s;
                    offset[i] = ts * m_a / c_s;
                }
            }
        }
        AffineStageDynamics { b, offset }
    }
}

/// One-step affine model s' = s + B a + offset, in whatever coordinates it
/// was built for. This is the form the projection eliminates states with.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStageDynamics {
    pub b: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineStageDynamics {
    pub fn d_s(&self) -> usize {
        self.b.nrows()
    }

    pub fn d_a(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        s + &self.b * a + &self.offset
    }

    /// Residual of the dynamics equality over a rollout of rows.
    pub fn residual(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..states.nrows() - 1 {
            let predicted = self.step(&states.row(i).transpose(), &actions.row(i).transpose());
            let actual = states.row(i + 1).transpose();
            worst = worst.max((predicted - actual).norm());
        }
        worst
    }
}
