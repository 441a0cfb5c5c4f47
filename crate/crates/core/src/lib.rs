//! Multi-scale joint-diffusion sampling over tiled latent canvases.
//!
//! A fixed-window denoiser is swept across a resolution pyramid: every
//! level is tiled with overlapping windows, windows are denoised
//! independently and merged by weighted least squares, and windows at finer
//! levels are steered by gradient descent toward the already-denoised
//! coarser level before their own denoising step. Analytic Gaussian-mixture
//! denoisers make every gradient exact and every claim checkable.

pub mod config;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod pyramid;
pub mod sampling;
pub mod schedule;
pub mod tiling;
pub mod verify;

pub use config::RunConfig;
pub use denoiser::{ConditionId, Denoiser, GmmDenoiser};
pub use error::{Error, Result};
pub use latent::{init_noise, LatentImage};
pub use pyramid::PyramidConfig;
pub use sampling::{GuidanceConfig, SampleOutput, Sampler, StepTrace};
pub use schedule::{decay_factor, Decay, NoiseSchedule};
pub use tiling::{WeightMatrix, WindowGrid, WindowSpec};
