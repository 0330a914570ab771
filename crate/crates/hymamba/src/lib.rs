//! Desk-scale hyperspectral object tracker built around three-directional
//! state-space scan kernels.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense f64 tensors, a reverse-mode tape, and AdamW;
//! - [`scan`] — ZOH discretization and the forward/backward/spectral scan
//!   kernels, including a block-parallel variant;
//! - [`attn`] — multi-head cross-attention, feed-forward, encoder blocks;
//! - [`net`] — the tracker network: spectral distillation, dual-branch patch
//!   embedding, state modules, augmentation layers, hidden-state threading;
//! - [`track`] — tracking head, losses, crops, template/state gating, the
//!   frame loop, and training steps;
//! - [`scene`] — synthetic hyperspectral video generation and the on-disk
//!   sequence store;
//! - [`metrics`] — IoU/success/precision metrics, one-pass evaluation, and
//!   the ablation harness;
//! - [`config`] / [`cli`] — flat run configuration and the command drivers
//!   used by the `hymamba` binary.
//!
//! See the crate examples for runnable entry points per capability.

pub mod attn;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod params;
pub mod scan;
pub mod scene;
pub mod tensor;
pub mod track;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor};

/// Seeded RNG used everywhere randomness is needed; one master seed flows
/// from the CLI down to every consumer.
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
