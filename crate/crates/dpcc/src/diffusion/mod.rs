//! Trajectory denoising: network, training, checkpointing, sampling.

pub mod checkpoint;
pub mod net;
pub mod sample;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use net::{noise_loss, noise_loss_grad, DenoiserNet};
pub use sample::{inpaint_condition, posterior_mean, sample_chain, sample_unconstrained, DenoiseHook, NoHook};
pub use train::{train, TrainConfig};
