//! Reverse-process sampling with state conditioning by inpainting.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::net::DenoiserNet;
use crate::schedule::NoiseSchedule;
use crate::traj::Trajectory;
use crate::{Error, Result};

/// Posterior mean for one denoising step given the predicted noise:
/// mu = (tau_k - beta_k / sqrt(1 - alpha_bar_k) * eps_hat) / sqrt(alpha_k).
pub fn posterior_mean_parts(
    tau_k: &DVector<f64>,
    eps_hat: &DVector<f64>,
    alpha_k: f64,
    alpha_bar_k: f64,
    beta_k: f64,
) -> DVector<f64> {
    let coef = beta_k / (1.0 - alpha_bar_k).sqrt();
    (tau_k - eps_hat * coef) / alpha_k.sqrt()
}

pub fn posterior_mean(
    tau_k: &DVector<f64>,
    eps_hat: &DVector<f64>,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<DVector<f64>> {
    if k == 0 || k > sched.k_max() {
        return Err(Error::InvalidArgument(format!("step k={k} outside 1..={}", sched.k_max())));
    }
    if tau_k.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch("tau_k and eps_hat lengths differ".into()));
    }
    Ok(posterior_mean_parts(tau_k, eps_hat, sched.alpha_k(k), sched.alpha_bar_k(k), sched.beta_k(k)))
}

/// Overwrites the measured-state slot (row 0 of states).
pub fn inpaint_condition(tau: &mut Trajectory, s_t: &DVector<f64>) {
    debug_assert_eq!(s_t.len(), tau.d_s());
    for c in 0..tau.d_s() {
        tau.states[(0, c)] = s_t[c];
    }
}

/// Interception points of the reverse process. The default implementations
/// leave everything unchanged, which yields plain unconstrained sampling.
pub trait DenoiseHook {
    /// Adjust the posterior mean before noise is added (gradient guidance).
    fn adjust_mean(&mut self, _k: usize, mu: Trajectory) -> Trajectory {
        mu
    }
    /// Transform the iterate after noise and conditioning (projections).
    /// Must preserve the conditioned first-state slot.
    fn after_step(&mut self, _k: usize, tau: Trajectory) -> Trajectory {
        tau
    }
}

/// No-op hook: plain sampling.
pub struct NoHook;

impl DenoiseHook for NoHook {}

/// Runs the reverse process for one chain. All randomness comes from `rng`:
/// the initial iterate draws `dim` values, then each step with k > 1 draws
/// `dim` more. The conditioned slot is rewritten after every step, and at
/// k = 1 the posterior is deterministic (sigma_1 = 0, no draw).
pub fn sample_chain<H: DenoiseHook>(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    rows: usize,
    d_s: usize,
    d_a: usize,
    s_t: &DVector<f64>,
    origin_time: i64,
    rng: &mut ChaCha8Rng,
    hook: &mut H,
) -> Result<Trajectory> {
    let dim = rows * (d_s + d_a);
    if net.traj_dim != dim {
        return Err(Error::ShapeMismatch(format!("net expects width {}, got {dim}", net.traj_dim)));
    }
    if s_t.len() != d_s {
        return Err(Error::ShapeMismatch("conditioning state has wrong dim".into()));
    }
    let draw = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        DVector::from_fn(dim, |_, _| rng.sample(rand_distr::StandardNormal))
    };

    let mut tau = Trajectory::unflatten(&draw(rng), rows, d_s, d_a, origin_time)?;
    inpaint_condition(&mut tau, s_t);
    for k in (1..=sched.k_max()).rev() {
        let flat = tau.flatten();
        let eps_hat = net.forward(&flat, k);
        let mu = posterior_mean(&flat, &eps_hat, k, sched)?;
        let mut mu_traj = Trajectory::unflatten(&mu, rows, d_s, d_a, origin_time)?;
        mu_traj = hook.adjust_mean(k, mu_traj);
        let mut next = if k > 1 {
            let noise = draw(rng);
            let sigma = sched.sigma_k(k);
            Trajectory::unflatten(&(mu_traj.flatten() + noise * sigma), rows, d_s, d_a, origin_time)?
        } else {
            mu_traj
        };
        inpaint_condition(&mut next, s_t);
        tau = hook.after_step(k, next);
    }
    if !tau.is_finite() {
        return Err(Error::Numeric("sampling produced non-finite trajectory".into()));
    }
    Ok(tau)
}

/// Unconstrained batch: one independent chain per seed.
pub fn sample_unconstrained(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    rows: usize,
    d_s: usize,
    d_a: usize,
    s_t: &DVector<f64>,
    origin_time: i64,
    chain_seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    chain_seeds
        .iter()
        .map(|&seed| {
            let mut rng = crate::rng::stream(seed);
            sample_chain(net, sched, rows, d_s, d_a, s_t, origin_time, &mut rng, &mut NoHook)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{cosine_schedule, marginal_mix};

    #[test]
    fn posterior_mean_zero_noise_prediction() {
        // eps_hat = 0: mu = tau / sqrt(alpha).
        let sched = cosine_schedule(10).unwrap();
        let tau = DVector::from_vec(vec![0.4, -0.8]);
        let mu = posterior_mean(&tau, &DVector::zeros(2), 4, &sched).unwrap();
        let want = &tau / sched.alpha_k(4).sqrt();
        assert!((mu - want).norm() < 1e-15);
    }

    #[test]
    fn posterior_mean_identity_in_no_noise_limit() {
        // alpha -> 1 with eps_hat = 0 leaves the iterate unchanged.
        let tau = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mu = posterior_mean_parts(&tau, &DVector::zeros(3), 1.0, 0.5, 0.0);
        assert_eq!(mu, tau);
    }

    // With the exact injected noise as the prediction, the eps-form mean
    // must equal the independently derived clean/noisy mixture form
    // mu = sqrt(ab_prev) beta/(1-ab) tau0 + sqrt(alpha)(1-ab_prev)/(1-ab) tau_k.
    #[test]
    fn posterior_mean_roundtrip_against_mixture_form() {
        let sched = cosine_schedule(20).unwrap();
        let mut rng = crate::rng::stream(3);
        use rand::Rng;
        for trial in 0..50 {
            let k = rng.gen_range(2..=20);
            let tau0 = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let eps = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let tau_k = marginal_mix(sched.alpha_bar_k(k), &tau0, &eps);
            let mu = posterior_mean(&tau_k, &eps, k, &sched).unwrap();
            let ab = sched.alpha_bar_k(k);
            let ab_prev = sched.alpha_bar_k(k - 1);
            let beta = sched.beta_k(k);
            let alpha = sched.alpha_k(k);
            let mixture = &tau0 * (ab_prev.sqrt() * beta / (1.0 - ab))
                + &tau_k * (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
            assert!(
                (&mu - &mixture).amax() <= 1e-10,
                "trial {trial}: max err {}",
                (&mu - &mixture).amax()
            );
        }
    }

    fn toy_net(seed: u64) -> (DenoiserNet, crate::schedule::NoiseSchedule) {
        let mut rng = crate::rng::stream(seed);
        // rows=2, d_s=1, d_a=1 -> traj_dim 4.
        (DenoiserNet::new(4, 4, &[8, 8], &mut rng).unwrap(), cosine_schedule(6).unwrap())
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let (net, sched) = toy_net(5);
        let s = DVector::from_vec(vec![0.3]);
        let a = sample_unconstrained(&net, &sched, 2, 1, 1, &s, 0, &[9, 10]).unwrap();
        let b = sample_unconstrained(&net, &sched, 2, 1, 1, &s, 0, &[9, 10]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn conditioned_slot_is_exact() {
        let (net, sched) = toy_net(6);
        let s = DVector::from_vec(vec![-0.7]);
        for t in sample_unconstrained(&net, &sched, 2, 1, 1, &s, 3, &[1, 2, 3]).unwrap() {
            assert_eq!(t.states[(0, 0)], -0.7);
            assert_eq!(t.origin_time, 3);
        }
    }

    #[test]
    fn hook_identity_matches_plain_sampling() {
        let (net, sched) = toy_net(7);
        let s = DVector::from_vec(vec![0.1]);
        let mut rng1 = crate::rng::stream(77);
        let mut rng2 = crate::rng::stream(77);
        let plain = sample_chain(&net, &sched, 2, 1, 1, &s, 0, &mut rng1, &mut NoHook).unwrap();
        struct Identity;
        impl DenoiseHook for Identity {}
        let hooked = sample_chain(&net, &sched, 2, 1, 1, &s, 0, &mut rng2, &mut Identity).unwrap();
        assert_eq!(plain, hooked);
    }
}
