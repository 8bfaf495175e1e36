//! Per-region adaptive classifier-free guidance for diffusion sampling.
//!
//! The crate wires together a full desk-scale guided-diffusion engine:
//!
//! * [`schedule`] — noise schedules, forward corruption, the reverse-step
//!   parameterizations, and the deterministic DDIM update;
//! * [`denoiser`] / [`gaussian`] — two conditional backends: a seeded
//!   attention denoiser that emits per-layer attention maps, and an analytic
//!   Gaussian-mixture score model used as a sampler oracle;
//! * [`segmentation`] — training-free token masks from cross-attention maps,
//!   refined by self-attention propagation;
//! * [`guidance`] — score composition with one global scale or per-region
//!   adaptive scales anchored to a benchmark region;
//! * [`pipeline`] — the sampling loop plus per-region norm diagnostics and
//!   the paired comparison harness;
//! * [`container`] / [`offline`] / [`export`] / [`manifest`] — the binary
//!   tensor container, the offline segmentation path over dumped attention
//!   stacks, plain-text exporters, and hashed run manifests.

pub mod attention;
pub mod container;
pub mod denoiser;
pub mod error;
pub mod export;
pub mod gaussian;
pub mod guidance;
pub mod latent;
pub mod manifest;
pub mod offline;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod schedule;
pub mod segmentation;

pub use error::{Error, Result};
