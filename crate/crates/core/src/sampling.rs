//! The deterministic sampling loop: per-window denoising, the joint
//! multi-window step with weighted-average merging, gradient guidance of
//! high-resolution windows toward already-denoised low-resolution structure,
//! and the per-timestep pyramid procedure tying them together.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionId, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{init_noise, LatentImage};
use crate::pyramid::PyramidConfig;
use crate::schedule::{decay_factor, Decay, NoiseSchedule};
use crate::tiling::{
    build_grid, crop, downsample, downsample_transpose, lowres_window, md_merge, WeightMatrix,
    WindowGrid, WindowSpec,
};

/// How guidance gradients are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Exact transpose-Jacobian chain through the denoiser.
    ExactVjp,
    /// Central finite differences of the guidance loss; works for denoisers
    /// without vjp support.
    FiniteDifference,
}

/// Gradient-guidance parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Base gradient weight ω.
    pub omega: f64,
    pub decay: Decay,
    /// Guidance is active only while t > tau_fraction·T.
    pub tau_fraction: f64,
    /// Gradient-descent iterations per window per timestep.
    pub grad_steps: usize,
    pub grad_mode: GradMode,
    /// Treat the denoiser as constant in the gradient chain, keeping only
    /// the affine part of the update.
    pub stop_denoiser_gradient: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega: 10.0,
            decay: Decay::ScaledCosine,
            tau_fraction: 0.7,
            grad_steps: 1,
            grad_mode: GradMode::ExactVjp,
            stop_denoiser_gradient: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::config("guidance.omega must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.tau_fraction) {
            return Err(Error::config("guidance.tau_fraction must be in [0, 1]"));
        }
        if self.grad_steps < 1 {
            return Err(Error::config("guidance.grad_steps must be >= 1"));
        }
        Ok(())
    }

    /// Largest timestep at which guidance is inactive. Guidance fires iff
    /// t > cutoff, so tau_fraction = 0.7 guides the first 30% of steps.
    pub fn tau_cutoff(&self, total_steps: usize) -> usize {
        // Guard against 0.7·50 rounding to 34.999… in binary.
        (self.tau_fraction * total_steps as f64 + 1e-9).floor() as usize
    }

    pub fn active_at(&self, t: usize, total_steps: usize) -> bool {
        t > self.tau_cutoff(total_steps)
    }

    /// Effective weight ω_t = ω · decay(t).
    pub fn effective_omega(&self, t: usize, total_steps: usize) -> f64 {
        self.omega * decay_factor(t, total_steps, self.decay)
    }
}

/// One deterministic denoising update: given the predicted noise, move
/// x_t to x_{t−1}.
pub fn ddim_step(
    x_t: &LatentImage,
    eps: &LatentImage,
    t: usize,
    schedule: &NoiseSchedule,
) -> LatentImage {
    assert!(t >= 1, "ddim_step called at t=0");
    assert!(t <= schedule.total_steps());
    assert_eq!(x_t.shape(), eps.shape(), "noise shape mismatch");
    let (coef_x, coef_eps) = ddim_coefficients(t, schedule);
    let mut out = x_t.clone();
    out.scale(coef_x);
    out.axpy(coef_eps, eps);
    out
}

/// The update is affine in (x, ε): x_{t−1} = a·x_t + b·ε with
/// a = √(ᾱ_{t−1}/ᾱ_t) and b = √(1−ᾱ_{t−1}) − a·√(1−ᾱ_t).
fn ddim_coefficients(t: usize, schedule: &NoiseSchedule) -> (f64, f64) {
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t - 1);
    let coef_x = (a_prev / a_t).sqrt();
    let coef_eps = (1.0 - a_prev).sqrt() - coef_x * (1.0 - a_t).sqrt();
    (coef_x, coef_eps)
}

/// One full denoising step on a window: predict noise, then update.
pub fn denoise_step(
    x_t: &LatentImage,
    t: usize,
    condition: ConditionId,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> LatentImage {
    let eps = denoiser.predict_noise(x_t, t, condition);
    ddim_step(x_t, &eps, t, schedule)
}

/// Transpose-Jacobian of [`denoise_step`] applied to `cotangent`: the update
/// is affine in (x, ε(x)), so the chain is a·u + b·(∂ε/∂x)ᵀu.
pub fn denoise_step_vjp(
    x_t: &LatentImage,
    t: usize,
    condition: ConditionId,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cotangent: &LatentImage,
    stop_denoiser_gradient: bool,
) -> LatentImage {
    let (coef_x, coef_eps) = ddim_coefficients(t, schedule);
    let mut out = cotangent.clone();
    out.scale(coef_x);
    if !stop_denoiser_gradient {
        let through = denoiser.vjp(x_t, t, condition, cotangent);
        out.axpy(coef_eps, &through);
    }
    out
}

/// Denoises every window of the grid independently and merges the results
/// by weighted averaging. The joint step over one level canvas.
pub fn multi_diffusion_step(
    z_t: &LatentImage,
    grid: &WindowGrid,
    weights: &WeightMatrix,
    t: usize,
    condition: ConditionId,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    let patches = denoise_windows(z_t, grid.windows(), t, condition, denoiser, schedule);
    let (h, w) = grid.canvas_size();
    md_merge(&patches, weights, z_t.channels(), h, w)
}

/// Per-window crop + denoise, parallel across windows, results in window
/// order.
fn denoise_windows(
    z_t: &LatentImage,
    windows: &[WindowSpec],
    t: usize,
    condition: ConditionId,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Vec<(WindowSpec, LatentImage)> {
    windows
        .par_iter()
        .map(|win| {
            let x = crop(z_t, win);
            (*win, denoise_step(&x, t, condition, denoiser, schedule))
        })
        .collect()
}

/// The guidance loss ‖ds(Φ(x)) − target‖² for one window.
pub fn guidance_loss(
    x: &LatentImage,
    lowres_target: &LatentImage,
    t: usize,
    condition: ConditionId,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    factor: usize,
) -> f64 {
    let denoised = denoise_step(x, t, condition, denoiser, schedule);
    downsample(&denoised, factor).sum_sq_diff(lowres_target)
}

/// Gradient-descent steering of a high-resolution window toward the
/// already-denoised low-resolution region it covers:
/// x ← x − ω_t · ∇_x ‖ds(Φ(x)) − target‖².
#[allow(clippy::too_many_arguments)]
pub fn multiscale_guidance(
    x_t: &LatentImage,
    lowres_target: &LatentImage,
    t: usize,
    condition: ConditionId,
    denoiser: &dyn Denoiser,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    factor: usize,
) -> LatentImage {
    assert_eq!(
        (
            lowres_target.channels(),
            lowres_target.height(),
            lowres_target.width()
        ),
        (x_t.channels(), x_t.height() / factor, x_t.width() / factor),
        "low-resolution target shape mismatch"
    );
    let omega_t = guidance.effective_omega(t, schedule.total_steps());
    if omega_t == 0.0 {
        return x_t.clone();
    }
    let mut x = x_t.clone();
    for _ in 0..guidance.grad_steps {
        let grad = match guidance.grad_mode {
            GradMode::ExactVjp => {
                let denoised = denoise_step(&x, t, condition, denoiser, schedule);
                let mut residual = downsample(&denoised, factor);
                residual.axpy(-1.0, lowres_target);
                residual.scale(2.0);
                let cotangent = downsample_transpose(&residual, factor);
                denoise_step_vjp(
                    &x,
                    t,
                    condition,
                    denoiser,
                    schedule,
                    &cotangent,
                    guidance.stop_denoiser_gradient,
                )
            }
            GradMode::FiniteDifference => {
                let step = 1e-4 * (1.0 + x.max_abs());
                let mut grad = LatentImage::zeros(x.channels(), x.height(), x.width());
                for i in 0..x.data().len() {
                    let mut plus = x.clone();
                    plus.data_mut()[i] += step;
                    let mut minus = x.clone();
                    minus.data_mut()[i] -= step;
                    let f_plus = guidance_loss(
                        &plus,
                        lowres_target,
                        t,
                        condition,
                        denoiser,
                        schedule,
                        factor,
                    );
                    let f_minus = guidance_loss(
                        &minus,
                        lowres_target,
                        t,
                        condition,
                        denoiser,
                        schedule,
                        factor,
                    );
                    grad.data_mut()[i] = (f_plus - f_minus) / (2.0 * step);
                }
                grad
            }
        };
        x.axpy(-omega_t, &grad);
    }
    x
}

/// Per-level losses recorded for one timestep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    /// Merge objective Σ_i ‖F_i(z_{t−1}) − Φ(window_i)‖² with uniform weights.
    pub l_md: f64,
    /// Cross-scale objective Σ_i ‖ds(F_i(z_{t−1})) − target_i‖²; absent at
    /// the lowest level.
    pub l_ms: Option<f64>,
}

/// Observability record for one timestep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub levels: Vec<LevelTrace>,
    /// Windows that went through guidance this step (τ rule).
    pub guidance_invocations: usize,
    pub duration_ms: f64,
}

/// Final canvases (one per level, index 0 = level 1) and the per-step traces.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub canvases: Vec<LatentImage>,
    pub traces: Vec<StepTrace>,
}

impl SampleOutput {
    pub fn final_canvas(&self) -> &LatentImage {
        self.canvases.last().expect("at least one level")
    }
}

/// Owns the per-level window grids and drives the sampling loop.
pub struct Sampler<'a> {
    pyramid: &'a PyramidConfig,
    schedule: &'a NoiseSchedule,
    guidance: &'a GuidanceConfig,
    weights: WeightMatrix,
    denoiser: &'a dyn Denoiser,
    condition: ConditionId,
    channels: usize,
    grids: Vec<WindowGrid>,
    renormalize_downsampled: bool,
}

impl<'a> Sampler<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pyramid: &'a PyramidConfig,
        schedule: &'a NoiseSchedule,
        guidance: &'a GuidanceConfig,
        weights: WeightMatrix,
        denoiser: &'a dyn Denoiser,
        condition: ConditionId,
        channels: usize,
        window_height: usize,
        window_width: usize,
        stride: usize,
        allow_boundary_windows: bool,
        renormalize_downsampled: bool,
    ) -> Result<Self> {
        guidance.validate()?;
        if condition.0 >= denoiser.num_conditions() {
            return Err(Error::config(format!(
                "condition {} out of range: denoiser has {} classes",
                condition.0,
                denoiser.num_conditions()
            )));
        }
        if denoiser.window_shape() != (channels, window_height, window_width) {
            return Err(Error::config(format!(
                "denoiser window shape {:?} does not match configured {:?}",
                denoiser.window_shape(),
                (channels, window_height, window_width)
            )));
        }
        let factor = pyramid.factor();
        if pyramid.levels() > 1 {
            if !stride.is_multiple_of(factor) {
                return Err(Error::config(format!(
                    "window.stride {stride} must be divisible by the pyramid factor {factor}"
                )));
            }
            if !window_height.is_multiple_of(factor) || !window_width.is_multiple_of(factor) {
                return Err(Error::config(format!(
                    "window {window_height}x{window_width} must be divisible by the pyramid factor {factor}"
                )));
            }
        }
        let mut grids = Vec::with_capacity(pyramid.levels());
        for level in 1..=pyramid.levels() {
            let (h, w) = pyramid.level_size(level);
            if !allow_boundary_windows
                && (!(h - window_height).is_multiple_of(stride)
                    || !(w - window_width).is_multiple_of(stride))
            {
                return Err(Error::config(format!(
                    "stride {stride} does not divide the level {level} span \
                     ({}x{}); enable window.allow_boundary_windows to permit \
                     boundary-aligned extras",
                    h - window_height,
                    w - window_width
                )));
            }
            grids.push(build_grid(
                h,
                w,
                window_height,
                window_width,
                stride,
                level,
            )?);
        }
        Ok(Sampler {
            pyramid,
            schedule,
            guidance,
            weights,
            denoiser,
            condition,
            channels,
            grids,
            renormalize_downsampled,
        })
    }

    pub fn grids(&self) -> &[WindowGrid] {
        &self.grids
    }

    fn ensure_finite(&self, z: &LatentImage, level: usize, timestep: usize) -> Result<()> {
        if z.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { level, timestep })
        }
    }

    /// One timestep over the whole pyramid: downsample chain, joint step at
    /// the lowest level, then guided denoising level by level upward.
    /// Returns z_{t−1} for every level, finest last.
    pub fn multiscale_step(
        &self,
        z_t: &LatentImage,
        t: usize,
    ) -> Result<(Vec<LatentImage>, StepTrace)> {
        assert!(t >= 1, "multiscale_step called at t=0");
        let started = Instant::now();
        let levels = self.pyramid.levels();
        let factor = self.pyramid.factor();

        // z_t at every level, index s−1 for level s.
        let mut chain: Vec<LatentImage> = vec![LatentImage::zeros(1, 1, 1); levels];
        chain[levels - 1] = z_t.clone();
        self.ensure_finite(&chain[levels - 1], levels, t)?;
        for level in (1..levels).rev() {
            let mut down = downsample(&chain[level], factor);
            if self.renormalize_downsampled {
                down.scale(factor as f64);
            }
            self.ensure_finite(&down, level, t)?;
            chain[level - 1] = down;
        }

        let mut outputs: Vec<LatentImage> = Vec::with_capacity(levels);
        let mut level_traces = Vec::with_capacity(levels);
        let mut guidance_invocations = 0usize;

        // Lowest level: plain joint denoising.
        let base_patches = denoise_windows(
            &chain[0],
            self.grids[0].windows(),
            t,
            self.condition,
            self.denoiser,
            self.schedule,
        );
        let (h1, w1) = self.grids[0].canvas_size();
        let z1 = md_merge(&base_patches, &self.weights, self.channels, h1, w1)?;
        self.ensure_finite(&z1, 1, t)?;
        level_traces.push(LevelTrace {
            level: 1,
            l_md: merge_objective(&z1, &base_patches),
            l_ms: None,
        });
        outputs.push(z1);

        // Higher levels: guide each window toward the already-denoised
        // lower-resolution region, then denoise and merge.
        for level in 2..=levels {
            let z_level = &chain[level - 1];
            let lower = &outputs[level - 2];
            let active = self.guidance.active_at(t, self.schedule.total_steps());
            let results: Vec<(WindowSpec, LatentImage, LatentImage)> = self.grids[level - 1]
                .windows()
                .par_iter()
                .map(|win| {
                    let x = crop(z_level, win);
                    let target = crop(lower, &lowres_window(win, factor));
                    let steered = if active {
                        multiscale_guidance(
                            &x,
                            &target,
                            t,
                            self.condition,
                            self.denoiser,
                            self.guidance,
                            self.schedule,
                            factor,
                        )
                    } else {
                        x
                    };
                    let patch =
                        denoise_step(&steered, t, self.condition, self.denoiser, self.schedule);
                    (*win, patch, target)
                })
                .collect();
            if active {
                guidance_invocations += results.len();
            }
            let patches: Vec<(WindowSpec, LatentImage)> =
                results.iter().map(|(w, p, _)| (*w, p.clone())).collect();
            let (h, w) = self.grids[level - 1].canvas_size();
            let merged = md_merge(&patches, &self.weights, self.channels, h, w)?;
            self.ensure_finite(&merged, level, t)?;
            let l_ms = results
                .iter()
                .map(|(win, _, target)| downsample(&crop(&merged, win), factor).sum_sq_diff(target))
                .sum();
            level_traces.push(LevelTrace {
                level,
                l_md: merge_objective(&merged, &patches),
                l_ms: Some(l_ms),
            });
            outputs.push(merged);
        }

        let trace = StepTrace {
            t,
            levels: level_traces,
            guidance_invocations,
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        Ok((outputs, trace))
    }

    /// The full T-step loop from seeded noise. Deterministic for a fixed
    /// seed.
    pub fn sample(&self, seed: u64) -> Result<SampleOutput> {
        let mut z = init_noise(self.pyramid, self.channels, seed);
        let mut traces = Vec::with_capacity(self.schedule.total_steps());
        let mut canvases = Vec::new();
        for t in (1..=self.schedule.total_steps()).rev() {
            let (outputs, trace) = self.multiscale_step(&z, t)?;
            z = outputs.last().expect("levels >= 1").clone();
            canvases = outputs;
            traces.push(trace);
        }
        Ok(SampleOutput { canvases, traces })
    }
}

/// The merge objective evaluated with uniform weights over the same windows.
fn merge_objective(canvas: &LatentImage, patches: &[(WindowSpec, LatentImage)]) -> f64 {
    patches
        .iter()
        .map(|(win, patch)| crop(canvas, win).sum_sq_diff(patch))
        .sum()
}
