//! Denoiser training: windowing, Adam, validation tracking.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffusion::checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
use crate::diffusion::net::{noise_loss, noise_loss_grad, DenoiserNet, Gradients, Linear};
use crate::normalize::Normalizer;
use crate::schedule::cosine_schedule;
use crate::{Error, Result};

fn default_hidden() -> Vec<usize> {
    vec![256, 256, 256]
}

fn default_shared_groups() -> Vec<Vec<usize>> {
    vec![vec![0, 1], vec![2, 3]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Planning window rows (H+1).
    pub rows: usize,
    /// Denoising steps K.
    pub k_steps: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Validation cadence in optimizer steps.
    pub val_every: usize,
    /// Cap on validation windows scored per evaluation.
    pub val_max_windows: usize,
    /// State dims fitted to a shared normalization scale (position pairs).
    pub shared_state_groups: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            k_steps: 20,
            train_steps: 20_000,
            batch: 8,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hidden: default_hidden(),
            embed_dim: 32,
            val_every: 1000,
            val_max_windows: 512,
            shared_state_groups: default_shared_groups(),
            seed: 0,
        }
    }
}

/// Demonstrations whose index hashes to the holdout bucket form the
/// validation split; the hash is of the index alone so the split is stable
/// across runs and seeds.
pub fn is_validation_demo(idx: usize) -> bool {
    crate::rng::mix(&[idx as u64, 0x5eed]) % 10 == 0
}

struct Adam {
    m: Vec<Linear>,
    v: Vec<Linear>,
    t: usize,
}

impl Adam {
    fn new(net: &DenoiserNet) -> Self {
        let zero = || net.zeros_like().layers;
        Self { m: zero(), v: zero(), t: 0 }
    }

    fn step(&mut self, net: &mut DenoiserNet, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for li in 0..net.layers.len() {
            let g = &grads.layers[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            for (w, (mw, (vw, gw))) in net.layers[li].w.iter_mut().zip(
                m.w.iter_mut().zip(v.w.iter_mut().zip(g.w.iter())),
            ) {
                *mw = b1 * *mw + (1.0 - b1) * gw;
                *vw = b2 * *vw + (1.0 - b2) * gw * gw;
                *w -= cfg.learning_rate * (*mw / bc1) / ((*vw / bc2).sqrt() + cfg.adam_eps);
            }
            for (b, (mb, (vb, gb))) in net.layers[li].b.iter_mut().zip(
                m.b.iter_mut().zip(v.b.iter_mut().zip(g.b.iter())),
            ) {
                *mb = b1 * *mb + (1.0 - b1) * gb;
                *vb = b2 * *vb + (1.0 - b2) * gb * gb;
                *b -= cfg.learning_rate * (*mb / bc1) / ((*vb / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// All length-`rows` windows of every demonstration, flattened and
/// normalized. Demonstrations shorter than one window are skipped.
fn windows(dataset: &Dataset, rows: usize, normalizer: &Normalizer, validation: bool) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for (idx, demo) in dataset.demos.iter().enumerate() {
        if is_validation_demo(idx) != validation {
            continue;
        }
        if demo.len() < rows {
            continue;
        }
        for start in 0..=demo.len() - rows {
            let states = demo.states.rows(start, rows).into_owned();
            let actions = demo.actions.rows(start, rows).into_owned();
            let t = crate::traj::Trajectory { states, actions, origin_time: start as i64 };
            out.push(normalizer.normalize_traj(&t).flatten());
        }
    }
    out
}

/// Fixed evaluation pack: windows paired with frozen (k, eps) draws so that
/// successive validation losses are comparable.
struct ValPack {
    flat: DMatrix<f64>,
    ks: Vec<usize>,
    eps: DMatrix<f64>,
}

impl ValPack {
    fn build(windows: &[DVector<f64>], cfg: &TrainConfig) -> Option<Self> {
        if windows.is_empty() {
            return None;
        }
        let mut rng = crate::rng::substream(cfg.seed, "val-pack", 0);
        let n = windows.len().min(cfg.val_max_windows);
        // Deterministic subsample without replacement.
        let mut order: Vec<usize> = (0..windows.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        order.truncate(n);
        let dim = windows[0].len();
        let mut flat = DMatrix::zeros(n, dim);
        let mut eps = DMatrix::zeros(n, dim);
        let mut ks = Vec::with_capacity(n);
        for (r, &wi) in order.iter().enumerate() {
            for c in 0..dim {
                flat[(r, c)] = windows[wi][c];
                eps[(r, c)] = rng.sample(rand_distr::StandardNormal);
            }
            ks.push(rng.gen_range(1..=cfg.k_steps));
        }
        Some(Self { flat, ks, eps })
    }

    fn loss(&self, net: &DenoiserNet, sched: &crate::schedule::NoiseSchedule) -> f64 {
        let n = self.flat.nrows();
        let dim = self.flat.ncols();
        let mut noised = DMatrix::zeros(n, dim);
        for r in 0..n {
            let ab = sched.alpha_bar_k(self.ks[r]);
            for c in 0..dim {
                noised[(r, c)] = ab.sqrt() * self.flat[(r, c)] + (1.0 - ab).sqrt() * self.eps[(r, c)];
            }
        }
        noise_loss(&net.forward_batch(&noised, &self.ks), &self.eps)
    }
}

/// Trains a denoiser on all windows of the dataset and returns the
/// best-validation checkpoint. Single-threaded and fully determined by
/// `cfg.seed`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if dataset.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 demonstrations, got {}",
            dataset.len()
        )));
    }
    if cfg.rows < 2 || cfg.batch == 0 || cfg.train_steps == 0 {
        return Err(Error::InvalidArgument("rows >= 2, batch >= 1, train_steps >= 1 required".into()));
    }
    let d_s = dataset.demos[0].d_s();
    let d_a = dataset.demos[0].d_a();
    if dataset.demos.iter().any(|d| d.d_s() != d_s || d.d_a() != d_a) {
        return Err(Error::ShapeMismatch("demonstrations disagree on state/action dims".into()));
    }

    let normalizer = Normalizer::fit(
        dataset.demos.iter().map(|d| (&d.states, &d.actions)),
        d_s,
        d_a,
        &cfg.shared_state_groups,
    )?;
    let train_windows = windows(dataset, cfg.rows, &normalizer, false);
    let val_windows = windows(dataset, cfg.rows, &normalizer, true);
    if train_windows.is_empty() {
        return Err(Error::InvalidArgument("no training windows (demos shorter than the horizon?)".into()));
    }
    // Tiny datasets may hash everything into the train split; validate on
    // the training windows then, which still gates divergence.
    let val_pack = ValPack::build(if val_windows.is_empty() { &train_windows } else { &val_windows }, cfg)
        .expect("nonempty windows");

    let sched = cosine_schedule(cfg.k_steps)?;
    let dim = cfg.rows * (d_s + d_a);
    let mut rng = crate::rng::substream(cfg.seed, "train", 0);
    let mut net = DenoiserNet::new(dim, cfg.embed_dim, &cfg.hidden, &mut rng)?;
    let mut adam = Adam::new(&net);

    let initial_val = val_pack.loss(&net, &sched);
    let mut best_val = initial_val;
    let mut best_step = 0;
    let mut best_net = net.clone();

    let mut flat = DMatrix::zeros(cfg.batch, dim);
    let mut eps = DMatrix::zeros(cfg.batch, dim);
    let mut ks = vec![0usize; cfg.batch];
    for step in 1..=cfg.train_steps {
        for r in 0..cfg.batch {
            let w = &train_windows[rng.gen_range(0..train_windows.len())];
            let k = rng.gen_range(1..=cfg.k_steps);
            ks[r] = k;
            let ab = sched.alpha_bar_k(k);
            for c in 0..dim {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                eps[(r, c)] = e;
                flat[(r, c)] = ab.sqrt() * w[c] + (1.0 - ab).sqrt() * e;
            }
        }
        let cache = net.forward_cached(&flat, &ks);
        let loss = noise_loss(&cache.output, &eps);
        if !loss.is_finite() {
            return Err(Error::TrainingFailure { step, detail: format!("non-finite loss {loss}") });
        }
        let grads = net.backward(&cache, &noise_loss_grad(&cache.output, &eps));
        adam.step(&mut net, &grads, cfg);

        if step % cfg.val_every == 0 || step == cfg.train_steps {
            let val = val_pack.loss(&net, &sched);
            if !val.is_finite() {
                return Err(Error::TrainingFailure { step, detail: format!("non-finite validation loss {val}") });
            }
            if val < best_val {
                best_val = val;
                best_step = step;
                best_net = net.clone();
            }
        }
    }

    Ok(Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        rows: cfg.rows,
        d_s,
        d_a,
        net: best_net,
        schedule: sched,
        normalizer,
        train_config: cfg.clone(),
        initial_val_loss: initial_val,
        best_val_loss: best_val,
        best_val_step: best_step,
    })
}
