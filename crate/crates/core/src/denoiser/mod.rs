//! The window denoiser interface and its analytic implementations.
//!
//! A denoiser maps a noisy window and a timestep to predicted noise, and
//! exposes the transpose-Jacobian product of that map so guidance gradients
//! can be evaluated exactly without an autodiff framework.

mod gmm;
mod scene;

pub use gmm::{gmm_predict_noise, gmm_vjp, GmmComponent, GmmPrior};
pub use scene::{generate_template, make_scene_denoiser, SceneFamily};

use crate::latent::LatentImage;
use crate::schedule::NoiseSchedule;

/// Selects a scene class, the stand-in for a text prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionId(pub usize);

/// A fixed-window noise predictor with exact gradient support.
///
/// Implementations must be deterministic in (x, t, condition) and pure, so
/// windows can be processed concurrently.
pub trait Denoiser: Send + Sync {
    /// Predicted noise for window `x` at timestep `t >= 1`. Output shape
    /// equals input shape.
    fn predict_noise(&self, x: &LatentImage, t: usize, condition: ConditionId) -> LatentImage;

    /// Transpose-Jacobian product of `predict_noise` at `x` applied to
    /// `cotangent`.
    fn vjp(
        &self,
        x: &LatentImage,
        t: usize,
        condition: ConditionId,
        cotangent: &LatentImage,
    ) -> LatentImage;

    /// Window shape (channels, height, width) this denoiser accepts.
    fn window_shape(&self) -> (usize, usize, usize);

    /// Number of valid condition ids.
    fn num_conditions(&self) -> usize;
}

/// An exact Gaussian-mixture denoiser: one prior per condition class, all
/// sharing the window shape and the noise schedule.
pub struct GmmDenoiser {
    priors: Vec<GmmPrior>,
    schedule: NoiseSchedule,
}

impl GmmDenoiser {
    pub fn new(priors: Vec<GmmPrior>, schedule: NoiseSchedule) -> Self {
        assert!(
            !priors.is_empty(),
            "denoiser needs at least one condition class"
        );
        let shape = priors[0].window_shape();
        assert!(
            priors.iter().all(|p| p.window_shape() == shape),
            "all condition classes must share one window shape"
        );
        GmmDenoiser { priors, schedule }
    }

    pub fn prior(&self, condition: ConditionId) -> &GmmPrior {
        &self.priors[condition.0]
    }

    fn check_call(&self, x: &LatentImage, t: usize, condition: ConditionId) {
        assert!(t >= 1, "denoiser called at t=0");
        assert!(
            t <= self.schedule.total_steps(),
            "timestep {t} beyond schedule"
        );
        assert!(
            condition.0 < self.priors.len(),
            "condition {} out of range (have {})",
            condition.0,
            self.priors.len()
        );
        assert_eq!(x.shape(), self.window_shape(), "window shape mismatch");
    }
}

impl Denoiser for GmmDenoiser {
    fn predict_noise(&self, x: &LatentImage, t: usize, condition: ConditionId) -> LatentImage {
        self.check_call(x, t, condition);
        gmm_predict_noise(x, self.schedule.alpha_bar(t), &self.priors[condition.0])
    }

    fn vjp(
        &self,
        x: &LatentImage,
        t: usize,
        condition: ConditionId,
        cotangent: &LatentImage,
    ) -> LatentImage {
        self.check_call(x, t, condition);
        assert_eq!(cotangent.shape(), x.shape(), "cotangent shape mismatch");
        gmm_vjp(
            x,
            self.schedule.alpha_bar(t),
            &self.priors[condition.0],
            cotangent,
        )
    }

    fn window_shape(&self) -> (usize, usize, usize) {
        self.priors[0].window_shape()
    }

    fn num_conditions(&self) -> usize {
        self.priors.len()
    }
}
