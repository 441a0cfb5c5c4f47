//! Run configuration: the JSON document driving a generation run. Every
//! field has a stable key; unknown keys are rejected with an error naming
//! the key.

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    generate_template, make_scene_denoiser, GmmComponent, GmmDenoiser, GmmPrior, SceneFamily,
};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::pyramid::PyramidConfig;
use crate::sampling::GuidanceConfig;
use crate::schedule::NoiseSchedule;
use crate::tiling::WeightMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSection {
    pub levels: usize,
    #[serde(default = "default_factor")]
    pub downsample_factor: usize,
    pub channels: usize,
    /// Level-S (full-resolution) canvas size.
    pub height: usize,
    pub width: usize,
}

fn default_factor() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_total_steps() -> usize {
    50
}
fn default_beta_min() -> f64 {
    0.015
}
fn default_beta_max() -> f64 {
    0.30
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            total_steps: default_total_steps(),
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Permit boundary-aligned extra windows when the stride does not
    /// divide the span. Off in reproduction configs.
    #[serde(default)]
    pub allow_boundary_windows: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum WeightSection {
    #[default]
    Uniform,
    /// Gaussian taper peaking at 1 in the window center with the given
    /// edge value.
    Gaussian { edge: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponentSection {
    pub weight: f64,
    /// Constant mean value across the window.
    pub mean_value: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSection {
    /// Mixture of constant-mean components; a verification denoiser.
    Gmm {
        components: Vec<GmmComponentSection>,
    },
    /// Patch-dictionary denoiser built from procedural scene templates,
    /// one class per condition id.
    Scene {
        classes: Vec<SceneFamily>,
        sigma2: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub image: String,
    pub raw: String,
    pub traces: String,
    /// Optional metric report basename (written as .json and .csv).
    pub metrics: Option<String>,
    /// Optional basename for exporting scene templates as images
    /// (written as <basename>_<class>.png).
    pub templates: Option<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".to_string(),
            image: "panorama.png".to_string(),
            raw: "panorama.bin".to_string(),
            traces: "traces.jsonl".to_string(),
            metrics: None,
            templates: None,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pyramid: PyramidSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub window: WindowSection,
    #[serde(default)]
    pub weights: WeightSection,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub denoiser: DenoiserSection,
    /// Rescale downsampled canvases by the factor so white noise keeps unit
    /// variance across levels. Off by default.
    #[serde(default)]
    pub renormalize_downsampled: bool,
    pub seed: u64,
    #[serde(default)]
    pub condition: usize,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses a JSON document, surfacing unknown or ill-typed keys.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn pyramid_config(&self) -> Result<PyramidConfig> {
        PyramidConfig::new(
            self.pyramid.levels,
            self.pyramid.downsample_factor,
            self.pyramid.height,
            self.pyramid.width,
        )
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear_beta(
            self.schedule.total_steps,
            self.schedule.beta_min,
            self.schedule.beta_max,
        )
    }

    pub fn weight_matrix(&self) -> Result<WeightMatrix> {
        match &self.weights {
            WeightSection::Uniform => {
                Ok(WeightMatrix::uniform(self.window.height, self.window.width))
            }
            WeightSection::Gaussian { edge } => {
                WeightMatrix::gaussian(self.window.height, self.window.width, *edge)
            }
        }
    }

    /// Builds the configured denoiser. The returned templates (scene kind
    /// only) feed the layout-coherence metric and template export.
    pub fn build_denoiser(
        &self,
        schedule: &NoiseSchedule,
    ) -> Result<(GmmDenoiser, Vec<LatentImage>)> {
        match &self.denoiser {
            DenoiserSection::Gmm { components } => {
                if components.is_empty() {
                    return Err(Error::config("denoiser.components must be non-empty"));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "denoiser.components weights must sum to 1, got {total}"
                    )));
                }
                let comps: Vec<GmmComponent> = components
                    .iter()
                    .map(|c| {
                        if c.sigma2 <= 0.0 {
                            return Err(Error::config("denoiser.components sigma2 must be > 0"));
                        }
                        Ok(GmmComponent {
                            weight: c.weight,
                            mean: LatentImage::from_fn(
                                self.pyramid.channels,
                                self.window.height,
                                self.window.width,
                                |_, _, _| c.mean_value,
                            ),
                            sigma2: c.sigma2,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok((
                    GmmDenoiser::new(vec![GmmPrior::new(comps)], schedule.clone()),
                    Vec::new(),
                ))
            }
            DenoiserSection::Scene { classes, sigma2 } => {
                if classes.is_empty() {
                    return Err(Error::config("denoiser.classes must be non-empty"));
                }
                let templates: Vec<LatentImage> = classes
                    .iter()
                    .map(|family| {
                        generate_template(
                            family,
                            self.pyramid.channels,
                            self.pyramid.height,
                            self.pyramid.width,
                        )
                    })
                    .collect::<Result<_>>()?;
                let denoiser = make_scene_denoiser(
                    &templates,
                    self.window.height,
                    self.window.width,
                    self.window.stride,
                    self.pyramid.levels,
                    self.pyramid.downsample_factor,
                    *sigma2,
                    schedule.clone(),
                )?;
                Ok((denoiser, templates))
            }
        }
    }

    /// The horizon parameters of the active condition's scene class, when
    /// the run uses a horizon scene. Drives the layout-coherence metric.
    pub fn horizon_scene(&self) -> Option<(f64, f64)> {
        match &self.denoiser {
            DenoiserSection::Scene { classes, .. } => match classes.get(self.condition) {
                Some(SceneFamily::Horizon { sky, ground, .. }) => Some((*sky, *ground)),
                _ => None,
            },
            _ => None,
        }
    }

    /// Cross-cutting validation beyond what the individual builders check.
    pub fn validate(&self) -> Result<()> {
        self.pyramid_config()?;
        self.noise_schedule()?;
        self.guidance.validate()?;
        self.weight_matrix()?;
        if self.pyramid.channels != 1 && self.pyramid.channels != 3 {
            return Err(Error::config(format!(
                "pyramid.channels must be 1 or 3 for image export, got {}",
                self.pyramid.channels
            )));
        }
        if let DenoiserSection::Scene { classes, .. } = &self.denoiser {
            if self.condition >= classes.len() {
                return Err(Error::config(format!(
                    "condition {} out of range: {} scene classes",
                    self.condition,
                    classes.len()
                )));
            }
        }
        Ok(())
    }
}

/// Applies `key=value` overrides at dotted paths into a JSON configuration
/// value. Values parse as JSON scalars where possible, falling back to
/// strings. Flags win over file values.
pub fn apply_override(config: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' must be key=value")))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = config;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let object = cursor
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override path '{path}' crosses a non-object")))?;
        if i + 1 == parts.len() {
            object.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = object
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override paths are non-empty");
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_config_json() -> String {
        r#"{
            "pyramid": {"levels": 1, "channels": 1, "height": 16, "width": 16},
            "window": {"height": 16, "width": 16, "stride": 16},
            "denoiser": {"kind": "gmm", "components": [
                {"weight": 1.0, "mean_value": 0.5, "sigma2": 0.1}
            ]},
            "seed": 1
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_json(&minimal_config_json()).unwrap();
        assert_eq!(cfg.schedule.total_steps, 50);
        assert_eq!(cfg.guidance.omega, 10.0);
        assert_eq!(cfg.guidance.tau_fraction, 0.7);
        assert_eq!(cfg.guidance.grad_steps, 1);
        assert!(matches!(cfg.weights, WeightSection::Uniform));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let bad = minimal_config_json().replace("\"seed\": 1", "\"seed\": 1, \"sede\": 2");
        let err = RunConfig::from_json(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sede"), "error should name the key: {msg}");
    }

    #[test]
    fn unknown_nested_key_is_rejected() {
        let bad = minimal_config_json().replace("\"stride\": 16", "\"stride\": 16, \"strids\": 2");
        let err = RunConfig::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("strids"));
    }

    #[test]
    fn overrides_apply_at_dotted_paths() {
        let mut value: serde_json::Value = serde_json::from_str(&minimal_config_json()).unwrap();
        apply_override(&mut value, "guidance.omega=0").unwrap();
        apply_override(&mut value, "seed=99").unwrap();
        let cfg = RunConfig::from_value(value).unwrap();
        assert_eq!(cfg.guidance.omega, 0.0);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn override_with_unknown_key_fails_at_parse() {
        let mut value: serde_json::Value = serde_json::from_str(&minimal_config_json()).unwrap();
        apply_override(&mut value, "guidance.weight=3").unwrap();
        let err = RunConfig::from_value(value).unwrap_err();
        assert!(err.to_string().contains("weight"), "got: {err}");
    }

    #[test]
    fn scene_config_builds() {
        let text = r#"{
            "pyramid": {"levels": 2, "channels": 1, "height": 64, "width": 256},
            "window": {"height": 32, "width": 32, "stride": 16},
            "denoiser": {"kind": "scene", "sigma2": 1e-4, "classes": [
                {"family": "horizon", "horizon_fraction": 0.5, "sky": 1.5, "ground": -1.5}
            ]},
            "seed": 7
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        cfg.validate().unwrap();
        let schedule = cfg.noise_schedule().unwrap();
        let (denoiser, templates) = cfg.build_denoiser(&schedule).unwrap();
        assert_eq!(templates.len(), 1);
        assert_eq!(cfg.horizon_scene(), Some((1.5, -1.5)));
        use crate::denoiser::Denoiser as _;
        assert_eq!(denoiser.window_shape(), (1, 32, 32));
    }

    #[test]
    fn gmm_weights_must_sum_to_one() {
        let text = minimal_config_json().replace("\"weight\": 1.0", "\"weight\": 0.5");
        let cfg = RunConfig::from_json(&text).unwrap();
        let schedule = cfg.noise_schedule().unwrap();
        assert!(cfg.build_denoiser(&schedule).is_err());
    }

    #[test]
    fn invalid_channel_count_rejected() {
        let text = minimal_config_json().replace("\"channels\": 1", "\"channels\": 2");
        let cfg = RunConfig::from_json(&text).unwrap();
        assert!(cfg.validate().is_err());
    }
}
