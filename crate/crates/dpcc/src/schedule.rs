//! Diffusion noise schedule and the closed-form forward marginal.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Variance schedule over denoising steps k = 1..=K.
///
/// Index 0 of every vector corresponds to k = 1. `alpha_bar` is the running
/// product of `alpha`; `sigma` is the posterior standard deviation, with
/// sigma_1 = 0 so the final denoising step is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step noise variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if beta.iter().any(|b| !(b > &0.0 && b < &1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let mut sigma = Vec::with_capacity(beta.len());
        for k in 1..=beta.len() {
            let ab_prev = if k == 1 { 1.0 } else { alpha_bar[k - 2] };
            let var = beta[k - 1] * (1.0 - ab_prev) / (1.0 - alpha_bar[k - 1]);
            sigma.push(var.sqrt());
        }
        Ok(Self { beta, alpha, alpha_bar, sigma })
    }

    pub fn k_max(&self) -> usize {
        self.beta.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.k_max() {
            return Err(Error::InvalidArgument(format!("step k={k} outside 1..={}", self.k_max())));
        }
        Ok(())
    }

    pub fn beta_k(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha_k(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn alpha_bar_k(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }

    pub fn sigma_k(&self, k: usize) -> f64 {
        self.sigma[k - 1]
    }
}

/// Cosine schedule: alpha_bar follows cos^2(((k/K + s)/(1 + s)) * pi/2)
/// normalized to 1 at k = 0, with per-step beta clipped at 0.999. The stored
/// alpha_bar is the running product of the clipped alphas, so the product
/// invariant holds exactly even at the clipped tail.
pub fn cosine_schedule(k_max: usize) -> Result<NoiseSchedule> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    const S: f64 = 0.008;
    const BETA_MAX: f64 = 0.999;
    let f = |k: f64| (((k / k_max as f64 + S) / (1.0 + S)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    let mut beta = Vec::with_capacity(k_max);
    let mut prev = f0;
    for k in 1..=k_max {
        let cur = f(k as f64);
        beta.push((1.0 - cur / prev).min(BETA_MAX));
        prev = cur;
    }
    NoiseSchedule::from_betas(beta)
}

/// Closed-form forward marginal: sqrt(ab) * tau0 + sqrt(1 - ab) * eps.
pub fn marginal_mix(alpha_bar: f64, tau0: &DVector<f64>, eps: &DVector<f64>) -> DVector<f64> {
    tau0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt()
}

/// Noises a clean flattened trajectory to diffusion step k.
pub fn forward_marginal_sample(
    tau0: &DVector<f64>,
    k: usize,
    sched: &NoiseSchedule,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    sched.check_k(k)?;
    if tau0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!("tau0 len {} vs eps len {}", tau0.len(), eps.len())));
    }
    Ok(marginal_mix(sched.alpha_bar_k(k), tau0, eps))
}
