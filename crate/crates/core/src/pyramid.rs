//! Resolution-pyramid geometry: the chain of canvas sizes related by the
//! downsampling factor.

use crate::error::{Error, Result};

/// Canvas sizes for levels 1..=S, where level S is the full-resolution
/// panorama and each lower level is `factor`× smaller per axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidConfig {
    levels: usize,
    factor: usize,
    /// Level-S canvas size.
    height: usize,
    width: usize,
}

impl PyramidConfig {
    pub fn new(levels: usize, factor: usize, height: usize, width: usize) -> Result<Self> {
        if levels < 1 {
            return Err(Error::config("pyramid.levels must be >= 1"));
        }
        if factor < 2 {
            return Err(Error::config("pyramid.downsample_factor must be >= 2"));
        }
        if height == 0 || width == 0 {
            return Err(Error::config("pyramid canvas must be non-empty"));
        }
        // Every level above 1 must divide cleanly into the next one down.
        let (mut h, mut w) = (height, width);
        for level in (2..=levels).rev() {
            if h % factor != 0 || w % factor != 0 {
                return Err(Error::config(format!(
                    "level {level} canvas {h}x{w} is not divisible by factor {factor}"
                )));
            }
            h /= factor;
            w /= factor;
        }
        Ok(PyramidConfig {
            levels,
            factor,
            height,
            width,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// (H_s, W_s) for level s in 1..=S.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        assert!(
            (1..=self.levels).contains(&level),
            "level {level} out of range 1..={}",
            self.levels
        );
        let shrink = self.factor.pow((self.levels - level) as u32);
        (self.height / shrink, self.width / shrink)
    }
}
