//! The latent canvas: a channels × height × width grid of reals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pyramid::PyramidConfig;

/// A real-valued C×H×W grid, stored row-major as (channel, row, column).
///
/// This is the object being denoised at every pyramid level, as well as the
/// shape of a single window handed to a denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "empty latent shape"
        );
        LatentImage {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(channels, height, width);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    img.set(c, r, col, f(c, r, col));
                }
            }
        }
        img
    }

    /// Wraps an existing buffer. The length must equal channels·height·width.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "latent data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(LatentImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, r: usize, col: usize) -> usize {
        debug_assert!(c < self.channels && r < self.height && col < self.width);
        (c * self.height + r) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[self.idx(c, r, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        let i = self.idx(c, r, col);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self + scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &LatentImage) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &LatentImage) -> f64 {
        assert_eq!(self.shape(), other.shape(), "diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sum of squared element-wise differences.
    pub fn sum_sq_diff(&self, other: &LatentImage) -> f64 {
        assert_eq!(self.shape(), other.shape(), "diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Draws the level-S starting canvas of i.i.d. standard normal samples.
/// Bit-reproducible for a fixed seed.
pub fn init_noise(pyramid: &PyramidConfig, channels: usize, seed: u64) -> LatentImage {
    let (height, width) = pyramid.level_size(pyramid.levels());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..channels * height * width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    LatentImage {
        channels,
        height,
        width,
        data,
    }
}
