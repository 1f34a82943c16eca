//! Noise-prediction MLP with hand-rolled reverse-mode gradients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One dense layer, weights stored (out x in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    fn random(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (inp as f64).sqrt();
        Self {
            w: DMatrix::from_fn(out, inp, |_, _| scale * normal(rng)),
            b: DVector::zeros(out),
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Self { w: DMatrix::zeros(out, inp), b: DVector::zeros(out) }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// MLP predicting the injected noise from a flattened trajectory and the
/// denoising step. The step enters through a sinusoidal embedding that is
/// concatenated to the trajectory input; hidden layers use a smooth
/// sigmoid-weighted activation so all gradients exist everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub traj_dim: usize,
    pub embed_dim: usize,
    pub layers: Vec<Linear>,
}

/// Per-layer gradients, same shapes as the layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Linear>,
}

/// Forward activations retained for the backward pass.
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    preacts: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl DenoiserNet {
    /// Randomly initialized net: traj_dim+embed_dim -> hidden.. -> traj_dim.
    pub fn new(traj_dim: usize, embed_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if traj_dim == 0 || embed_dim == 0 || embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(
                "traj_dim must be positive and embed_dim a positive even number".into(),
            ));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        let mut sizes = vec![traj_dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(traj_dim);
        let layers = sizes
            .windows(2)
            .map(|w| Linear::random(w[1], w[0], rng))
            .collect();
        Ok(Self { traj_dim, embed_dim, layers })
    }

    /// All-zero net of the same shape (predicts zero noise everywhere).
    pub fn zeros_like(&self) -> Self {
        Self {
            traj_dim: self.traj_dim,
            embed_dim: self.embed_dim,
            layers: self.layers.iter().map(|l| Linear::zeros(l.w.nrows(), l.w.ncols())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Sinusoidal embedding of the denoising step index.
    pub fn embed_step(&self, k: usize) -> DVector<f64> {
        let half = self.embed_dim / 2;
        let mut out = DVector::zeros(self.embed_dim);
        for i in 0..half {
            let freq = if half > 1 {
                (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            };
            out[i] = (k as f64 * freq).sin();
            out[half + i] = (k as f64 * freq).cos();
        }
        out
    }

    fn assemble_input(&self, flat: &DMatrix<f64>, ks: &[usize]) -> DMatrix<f64> {
        let n = flat.nrows();
        let mut x = DMatrix::zeros(n, self.traj_dim + self.embed_dim);
        for r in 0..n {
            for c in 0..self.traj_dim {
                x[(r, c)] = flat[(r, c)];
            }
            let emb = self.embed_step(ks[r]);
            for c in 0..self.embed_dim {
                x[(r, self.traj_dim + c)] = emb[c];
            }
        }
        x
    }

    /// Batched forward pass; rows of `flat` are flattened trajectories.
    pub fn forward_batch(&self, flat: &DMatrix<f64>, ks: &[usize]) -> DMatrix<f64> {
        self.forward_cached(flat, ks).output
    }

    /// Single-sample convenience wrapper.
    pub fn forward(&self, flat: &DVector<f64>, k: usize) -> DVector<f64> {
        let m = DMatrix::from_rows(&[flat.transpose()]);
        self.forward_batch(&m, &[k]).row(0).transpose()
    }

    /// Forward pass that retains activations for [`DenoiserNet::backward`].
    pub fn forward_cached(&self, flat: &DMatrix<f64>, ks: &[usize]) -> ForwardCache {
        assert_eq!(flat.nrows(), ks.len(), "one step index per batch row");
        assert_eq!(flat.ncols(), self.traj_dim, "flattened trajectory width");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = self.assemble_input(flat, ks);
        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let mut z = &h * layer.w.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.b.transpose();
            }
            if li + 1 < self.layers.len() {
                preacts.push(z.clone());
                h = z.map(silu);
            } else {
                h = z;
            }
        }
        ForwardCache { inputs, preacts, output: h }
    }

    /// Reverse-mode gradients given dL/d(output).
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> Gradients {
        let mut grads: Vec<Linear> = self
            .layers
            .iter()
            .map(|l| Linear::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        let mut dz = d_out.clone();
        for li in (0..self.layers.len()).rev() {
            let x = &cache.inputs[li];
            grads[li].w = dz.transpose() * x;
            for r in 0..dz.nrows() {
                for c in 0..dz.ncols() {
                    grads[li].b[c] += dz[(r, c)];
                }
            }
            if li > 0 {
                let dx = &dz * &self.layers[li].w;
                let z = &cache.preacts[li - 1];
                dz = DMatrix::from_fn(dx.nrows(), dx.ncols(), |r, c| dx[(r, c)] * silu_deriv(z[(r, c)]));
            }
        }
        Gradients { layers: grads }
    }
}

/// Mean over batch rows of the squared noise-prediction residual.
pub fn noise_loss(eps_hat: &DMatrix<f64>, eps: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(eps_hat.shape(), eps.shape());
    let n = eps_hat.nrows() as f64;
    let mut acc = 0.0;
    for (a, b) in eps_hat.iter().zip(eps.iter()) {
        acc += (a - b) * (a - b);
    }
    acc / n
}

/// dL/d(eps_hat) matching [`noise_loss`].
pub fn noise_loss_grad(eps_hat: &DMatrix<f64>, eps: &DMatrix<f64>) -> DMatrix<f64> {
    let n = eps_hat.nrows() as f64;
    DMatrix::from_fn(eps_hat.nrows(), eps_hat.ncols(), |r, c| 2.0 * (eps_hat[(r, c)] - eps[(r, c)]) / n)
}
