//! Retrieval-and-refinement diffusion (R2-Diff) for context-conditioned
//! trajectory prediction.
//!
//! The crate implements the full pipeline on synthetic manipulation-style
//! tasks: a DDPM noise schedule auto-tuned from nearest-neighbor motion
//! distances, a transformer noise predictor with in-repo reverse-mode
//! differentiation, trajectory-aligned scene feature retrieval, and the
//! inference loop that denoises a retrieved motion instead of Gaussian noise.
//!
//! The crate is `no_std` compatible (`alloc` required); the `std` feature
//! (default) enables faster matmul kernels, and `parallel` adds rayon-backed
//! batch gradient evaluation.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod denoiser;
pub mod error;
pub mod infer;
pub mod linalg;
pub mod motion;
pub mod nn;
pub mod scene;
pub mod schedule;
pub mod tasks;

pub use denoiser::{ArchConfig, DenoiserModel, OptimizerKind, TrainConfig};
pub use error::{Error, Result};
pub use infer::{infer, InferenceConfig, InferenceOutcome, InitMode, NoisePredictor};
pub use motion::{DatasetMeta, DistanceWeights, HandState, Motion, MotionDataset};
pub use scene::{RetrievalMethod, RetrievalResult, SceneField, SteFeature};
pub use schedule::{tune, NoiseSchedule, PosteriorVariance, TuningResult};
pub use tasks::{generate_dataset, evaluate_success, Episode, FamilyKind, Mode, TaskFamily};

/// Derives an independent RNG seed for a work item (episode, batch entry)
/// from a base seed, so parallel generation never depends on scheduling.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
