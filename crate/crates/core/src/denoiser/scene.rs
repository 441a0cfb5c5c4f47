//! Procedural scene templates and the patch-dictionary denoiser built from
//! them.
//!
//! The scene denoiser is the layout-failure testbed: its mixture components
//! are window-shaped patches cropped from full-panorama templates, so the
//! denoiser itself carries no global position information. Joint denoising
//! without cross-scale guidance is then free to pick mutually inconsistent
//! patches for neighboring windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::schedule::NoiseSchedule;
use crate::tiling::{build_grid, crop, downsample};

use super::{GmmDenoiser, GmmPrior};

/// Parameterized template families. All are deterministic functions of their
/// parameters and the canvas size.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneFamily {
    /// Two horizontal bands: `sky` above the horizon row, `ground` below.
    Horizon {
        /// Horizon row as a fraction of the canvas height.
        horizon_fraction: f64,
        sky: f64,
        ground: f64,
    },
    /// Vertical gradient from `top` to `bottom`.
    GradientSky { top: f64, bottom: f64 },
    /// Vertical stripes of the given period, alternating `high` and `low`.
    Stripes {
        period: usize,
        phase: usize,
        high: f64,
        low: f64,
    },
}

impl SceneFamily {
    pub fn horizon_row(&self, height: usize) -> Option<usize> {
        match self {
            SceneFamily::Horizon {
                horizon_fraction, ..
            } => Some(((horizon_fraction * height as f64).round() as usize).min(height)),
            _ => None,
        }
    }
}

/// Renders a template at full-panorama resolution. Values are replicated
/// across channels.
pub fn generate_template(
    family: &SceneFamily,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<LatentImage> {
    match family {
        SceneFamily::Horizon {
            horizon_fraction,
            sky,
            ground,
        } => {
            if !(0.0..=1.0).contains(horizon_fraction) {
                return Err(Error::config(format!(
                    "horizon_fraction must be in [0, 1], got {horizon_fraction}"
                )));
            }
            let row = family.horizon_row(height).unwrap();
            Ok(LatentImage::from_fn(channels, height, width, |_, r, _| {
                if r < row {
                    *sky
                } else {
                    *ground
                }
            }))
        }
        SceneFamily::GradientSky { top, bottom } => {
            let denom = (height.max(2) - 1) as f64;
            Ok(LatentImage::from_fn(channels, height, width, |_, r, _| {
                top + (bottom - top) * r as f64 / denom
            }))
        }
        SceneFamily::Stripes {
            period,
            phase,
            high,
            low,
        } => {
            if *period == 0 {
                return Err(Error::config("stripes period must be >= 1"));
            }
            Ok(LatentImage::from_fn(
                channels,
                height,
                width,
                |_, _, col| {
                    if ((col + phase) / period) % 2 == 0 {
                        *high
                    } else {
                        *low
                    }
                },
            ))
        }
    }
}

/// Builds the patch-dictionary denoiser: one mixture per template class,
/// whose components are the distinct window-shaped crops taken at every
/// pyramid level's tiling grid.
#[allow(clippy::too_many_arguments)]
pub fn make_scene_denoiser(
    templates: &[LatentImage],
    window_height: usize,
    window_width: usize,
    stride: usize,
    levels: usize,
    factor: usize,
    sigma2: f64,
    schedule: NoiseSchedule,
) -> Result<GmmDenoiser> {
    if templates.is_empty() {
        return Err(Error::config("scene denoiser needs at least one template"));
    }
    if sigma2 <= 0.0 {
        return Err(Error::config("scene sigma2 must be positive"));
    }
    let mut priors = Vec::with_capacity(templates.len());
    for template in templates {
        let mut patches: Vec<LatentImage> = Vec::new();
        let mut current = template.clone();
        for level in (1..=levels).rev() {
            let grid = build_grid(
                current.height(),
                current.width(),
                window_height,
                window_width,
                stride,
                level,
            )
            .map_err(|e| {
                Error::config(format!(
                    "scene template does not tile at level {level}: {e}"
                ))
            })?;
            for win in grid.windows() {
                let patch = crop(&current, win);
                if !patches.contains(&patch) {
                    patches.push(patch);
                }
            }
            if level > 1 {
                if current.height() % factor != 0 || current.width() % factor != 0 {
                    return Err(Error::config(
                        "scene template size must be divisible by the pyramid factor",
                    ));
                }
                current = downsample(&current, factor);
            }
        }
        priors.push(GmmPrior::equal_weight(patches, sigma2));
    }
    Ok(GmmDenoiser::new(priors, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConditionId, Denoiser};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear_beta(50, 0.015, 0.30).unwrap()
    }

    #[test]
    fn horizon_template_bands() {
        let family = SceneFamily::Horizon {
            horizon_fraction: 0.5,
            sky: 1.5,
            ground: -1.5,
        };
        let tpl = generate_template(&family, 1, 64, 256).unwrap();
        assert_eq!(tpl.get(0, 0, 0), 1.5);
        assert_eq!(tpl.get(0, 31, 100), 1.5);
        assert_eq!(tpl.get(0, 32, 100), -1.5);
        assert_eq!(tpl.get(0, 63, 255), -1.5);
    }

    #[test]
    fn stripes_template_period() {
        let family = SceneFamily::Stripes {
            period: 4,
            phase: 0,
            high: 1.0,
            low: -1.0,
        };
        let tpl = generate_template(&family, 1, 8, 16).unwrap();
        assert_eq!(tpl.get(0, 0, 0), 1.0);
        assert_eq!(tpl.get(0, 0, 3), 1.0);
        assert_eq!(tpl.get(0, 0, 4), -1.0);
        assert_eq!(tpl.get(0, 0, 8), 1.0);
    }

    #[test]
    fn uniform_horizon_dictionary_dedupes_to_three_patches() {
        // 64×256 template, 32×32 windows, stride 16, two levels: the
        // horizontally uniform horizon scene yields exactly {all-sky,
        // band, all-ground}; the full-height level-1 crops coincide with
        // the mid-row band patch.
        let family = SceneFamily::Horizon {
            horizon_fraction: 0.5,
            sky: 1.5,
            ground: -1.5,
        };
        let tpl = generate_template(&family, 1, 64, 256).unwrap();
        let den = make_scene_denoiser(&[tpl], 32, 32, 16, 2, 2, 1e-4, schedule()).unwrap();
        assert_eq!(den.prior(ConditionId(0)).components().len(), 3);
        assert_eq!(den.window_shape(), (1, 32, 32));
        assert_eq!(den.num_conditions(), 1);
    }

    #[test]
    fn full_template_window_posterior_approaches_template() {
        // Window equal to the full template: at small t the clean estimate
        // recovered from the predicted noise approaches the template.
        let family = SceneFamily::Horizon {
            horizon_fraction: 0.5,
            sky: 1.0,
            ground: -1.0,
        };
        let tpl = generate_template(&family, 1, 16, 16).unwrap();
        let sched = schedule();
        let den = make_scene_denoiser(
            std::slice::from_ref(&tpl),
            16,
            16,
            16,
            1,
            2,
            1e-6,
            sched.clone(),
        )
        .unwrap();
        let t = 1;
        let ab = sched.alpha_bar(t);
        let mut x = tpl.clone();
        x.scale(ab.sqrt());
        let eps = den.predict_noise(&x, t, ConditionId(0));
        let clean = LatentImage::from_fn(1, 16, 16, |c, r, col| {
            (x.get(c, r, col) - (1.0 - ab).sqrt() * eps.get(c, r, col)) / ab.sqrt()
        });
        assert!(clean.max_abs_diff(&tpl) < 1e-6);
    }

    #[test]
    fn empty_template_list_rejected() {
        assert!(make_scene_denoiser(&[], 8, 8, 4, 1, 2, 1e-4, schedule()).is_err());
    }

    #[test]
    fn non_tiling_template_rejected() {
        let tpl = LatentImage::zeros(1, 10, 10);
        // Window larger than the template cannot tile it.
        assert!(make_scene_denoiser(&[tpl], 16, 16, 8, 1, 2, 1e-4, schedule()).is_err());
    }
}
