//! Window geometry, crop/uncrop algebra, and the weighted-average merge that
//! solves the per-pixel least-squares objective over overlapping windows.

use crate::error::{Error, Result};
use crate::latent::LatentImage;

/// One crop region on a level canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Pyramid level this window lives on.
    pub level: usize,
}

impl WindowSpec {
    pub fn new(top: usize, left: usize, height: usize, width: usize, level: usize) -> Self {
        WindowSpec {
            top,
            left,
            height,
            width,
            level,
        }
    }

    pub fn fits(&self, canvas_height: usize, canvas_width: usize) -> bool {
        self.top + self.height <= canvas_height && self.left + self.width <= canvas_width
    }
}

/// The ordered window set tiling one level canvas, with its per-pixel
/// coverage counts. Windows are generated row-major so merge accumulation
/// order is deterministic.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    windows: Vec<WindowSpec>,
    coverage: Vec<u32>,
    canvas_height: usize,
    canvas_width: usize,
}

impl WindowGrid {
    pub fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn canvas_size(&self) -> (usize, usize) {
        (self.canvas_height, self.canvas_width)
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    /// Greatest top/left edges interior to the canvas, used by the seam
    /// metric to locate window boundaries.
    pub fn interior_boundaries(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for w in &self.windows {
            if w.top > 0 {
                rows.push(w.top);
            }
            if w.top + w.height < self.canvas_height {
                rows.push(w.top + w.height);
            }
            if w.left > 0 {
                cols.push(w.left);
            }
            if w.left + w.width < self.canvas_width {
                cols.push(w.left + w.width);
            }
        }
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        (rows, cols)
    }
}

/// Offsets 0, stride, 2·stride, … along one axis, with a final
/// boundary-aligned offset appended when the span is not a stride multiple.
fn axis_offsets(canvas: usize, window: usize, stride: usize) -> Vec<usize> {
    let span = canvas - window;
    let mut offsets: Vec<usize> = (0..=span).step_by(stride).collect();
    if !span.is_multiple_of(stride) {
        offsets.push(span);
    }
    offsets
}

/// Tiles an H×W canvas with h×w windows at the given stride.
///
/// Full coverage is guaranteed for stride ≤ min(h, w); a gap (stride too
/// large) is reported as a configuration error, as is a window exceeding
/// the canvas.
pub fn build_grid(
    canvas_height: usize,
    canvas_width: usize,
    window_height: usize,
    window_width: usize,
    stride: usize,
    level: usize,
) -> Result<WindowGrid> {
    if window_height > canvas_height || window_width > canvas_width {
        return Err(Error::config(format!(
            "window {window_height}x{window_width} larger than canvas {canvas_height}x{canvas_width}"
        )));
    }
    if stride == 0 {
        return Err(Error::config("window stride must be >= 1"));
    }
    let mut windows = Vec::new();
    for top in axis_offsets(canvas_height, window_height, stride) {
        for left in axis_offsets(canvas_width, window_width, stride) {
            windows.push(WindowSpec::new(
                top,
                left,
                window_height,
                window_width,
                level,
            ));
        }
    }
    let mut coverage = vec![0u32; canvas_height * canvas_width];
    for w in &windows {
        for r in w.top..w.top + w.height {
            for c in w.left..w.left + w.width {
                coverage[r * canvas_width + c] += 1;
            }
        }
    }
    if let Some(i) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::config(format!(
            "grid leaves pixel (row {}, col {}) uncovered; stride {stride} too large for window {window_height}x{window_width}",
            i / canvas_width,
            i % canvas_width
        )));
    }
    Ok(WindowGrid {
        windows,
        coverage,
        canvas_height,
        canvas_width,
    })
}

/// Per-window weight matrix applied during the merge. All windows share one
/// h×w matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl WeightMatrix {
    pub fn uniform(height: usize, width: usize) -> Self {
        WeightMatrix {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    /// Separable Gaussian taper: 1 at the window center, `edge` at the
    /// midpoint of each edge (so `edge²` at the corners).
    pub fn gaussian(height: usize, width: usize, edge: f64) -> Result<Self> {
        if !(edge > 0.0 && edge <= 1.0) {
            return Err(Error::config(format!(
                "weights.edge must be in (0, 1], got {edge}"
            )));
        }
        let ln_edge = edge.ln();
        let axis = |n: usize, i: usize| -> f64 {
            if n <= 1 {
                return 1.0;
            }
            let center = (n - 1) as f64 / 2.0;
            let u = (i as f64 - center) / center;
            (ln_edge * u * u).exp()
        };
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(axis(height, r) * axis(width, c));
            }
        }
        Ok(WeightMatrix {
            height,
            width,
            values,
        })
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::config("weight matrix size mismatch"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(
                "weight matrix entries must be finite and >= 0",
            ));
        }
        if !values.iter().any(|v| *v > 0.0) {
            return Err(Error::config(
                "weight matrix needs at least one positive entry",
            ));
        }
        Ok(WeightMatrix {
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Copies the window region out of a canvas.
pub fn crop(z: &LatentImage, win: &WindowSpec) -> LatentImage {
    assert!(
        win.fits(z.height(), z.width()),
        "window (top {}, left {}, {}x{}) out of bounds for {}x{} canvas",
        win.top,
        win.left,
        win.height,
        win.width,
        z.height(),
        z.width()
    );
    LatentImage::from_fn(z.channels(), win.height, win.width, |c, r, col| {
        z.get(c, win.top + r, win.left + col)
    })
}

/// Adds `weights ⊗ patch` into `acc` at the window location and the weights
/// into the per-pixel accumulator. Regions outside the window are untouched.
pub fn uncrop_accumulate(
    acc: &mut LatentImage,
    weight_acc: &mut [f64],
    patch: &LatentImage,
    weights: &WeightMatrix,
    win: &WindowSpec,
) {
    assert_eq!(
        (patch.height(), patch.width()),
        (win.height, win.width),
        "patch shape does not match window"
    );
    assert_eq!(
        weights.shape(),
        (win.height, win.width),
        "weight matrix shape mismatch"
    );
    assert_eq!(weight_acc.len(), acc.height() * acc.width());
    assert!(win.fits(acc.height(), acc.width()));
    let canvas_width = acc.width();
    for c in 0..patch.channels() {
        for r in 0..win.height {
            for col in 0..win.width {
                let w = weights.get(r, col);
                let i = acc.idx(c, win.top + r, win.left + col);
                acc.data_mut()[i] += w * patch.get(c, r, col);
            }
        }
    }
    for r in 0..win.height {
        for col in 0..win.width {
            weight_acc[(win.top + r) * canvas_width + win.left + col] += weights.get(r, col);
        }
    }
}

/// Merges per-window patches into one canvas by weighted averaging:
/// `(Σ_i W_i ⊗ F_i⁻¹(patch_i)) / (Σ_i W_i)` per pixel. This is the unique
/// minimizer of the per-window weighted least-squares objective.
///
/// Accumulation runs in window order, so the result is deterministic.
pub fn md_merge(
    patches: &[(WindowSpec, LatentImage)],
    weights: &WeightMatrix,
    channels: usize,
    canvas_height: usize,
    canvas_width: usize,
) -> Result<LatentImage> {
    let mut acc = LatentImage::zeros(channels, canvas_height, canvas_width);
    let mut weight_acc = vec![0.0f64; canvas_height * canvas_width];
    for (win, patch) in patches {
        uncrop_accumulate(&mut acc, &mut weight_acc, patch, weights, win);
    }
    for (i, &w) in weight_acc.iter().enumerate() {
        if w <= 0.0 {
            return Err(Error::Coverage {
                row: i / canvas_width,
                col: i % canvas_width,
            });
        }
    }
    for c in 0..channels {
        for r in 0..canvas_height {
            for col in 0..canvas_width {
                let i = acc.idx(c, r, col);
                acc.data_mut()[i] /= weight_acc[r * canvas_width + col];
            }
        }
    }
    Ok(acc)
}

/// The window on the next-coarser level covering the same region.
/// Geometry must be factor-aligned; this is validated once at configuration
/// time, and asserted here.
pub fn lowres_window(win: &WindowSpec, factor: usize) -> WindowSpec {
    assert!(
        win.level >= 2,
        "level-1 windows have no coarser counterpart"
    );
    assert!(
        win.top.is_multiple_of(factor)
            && win.left.is_multiple_of(factor)
            && win.height.is_multiple_of(factor)
            && win.width.is_multiple_of(factor),
        "window (top {}, left {}, {}x{}) not aligned to factor {factor}",
        win.top,
        win.left,
        win.height,
        win.width
    );
    WindowSpec::new(
        win.top / factor,
        win.left / factor,
        win.height / factor,
        win.width / factor,
        win.level - 1,
    )
}

/// factor×factor mean pooling per channel. Equivalent to area-weighted
/// bilinear interpolation at exact integer scale, and exactly linear.
pub fn downsample(z: &LatentImage, factor: usize) -> LatentImage {
    assert!(factor >= 1);
    assert!(
        z.height().is_multiple_of(factor) && z.width().is_multiple_of(factor),
        "{}x{} canvas not divisible by factor {factor}",
        z.height(),
        z.width()
    );
    let norm = 1.0 / (factor * factor) as f64;
    LatentImage::from_fn(
        z.channels(),
        z.height() / factor,
        z.width() / factor,
        |c, r, col| {
            let mut sum = 0.0;
            for dr in 0..factor {
                for dc in 0..factor {
                    sum += z.get(c, r * factor + dr, col * factor + dc);
                }
            }
            sum * norm
        },
    )
}

/// Transpose of [`downsample`] as a linear operator: each coarse value is
/// scattered to its factor×factor block, scaled by 1/factor².
pub fn downsample_transpose(y: &LatentImage, factor: usize) -> LatentImage {
    let norm = 1.0 / (factor * factor) as f64;
    LatentImage::from_fn(
        y.channels(),
        y.height() * factor,
        y.width() * factor,
        |c, r, col| y.get(c, r / factor, col / factor) * norm,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> LatentImage {
        LatentImage::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn paper_grid_counts() {
        assert_eq!(build_grid(128, 512, 64, 64, 32, 2).unwrap().len(), 45);
        assert_eq!(build_grid(64, 256, 64, 64, 32, 1).unwrap().len(), 7);
        assert_eq!(build_grid(64, 64, 64, 64, 32, 1).unwrap().len(), 1);
    }

    #[test]
    fn grid_count_formula_when_divisible() {
        let (h_canvas, w_canvas, win, stride) = (96usize, 160usize, 32usize, 16usize);
        let grid = build_grid(h_canvas, w_canvas, win, win, stride, 1).unwrap();
        let expect = ((h_canvas - win) / stride + 1) * ((w_canvas - win) / stride + 1);
        assert_eq!(grid.len(), expect);
    }

    #[test]
    fn boundary_windows_appended_for_non_divisible_span() {
        // 70−32 = 38 is not a multiple of 16: offsets 0, 16, 32, then 38.
        let grid = build_grid(70, 32, 32, 32, 16, 1).unwrap();
        let tops: Vec<usize> = grid.windows().iter().map(|w| w.top).collect();
        assert_eq!(tops, vec![0, 16, 32, 38]);
        assert!(grid.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn grid_rejects_oversized_window() {
        assert!(build_grid(32, 32, 64, 64, 32, 1).is_err());
    }

    #[test]
    fn grid_rejects_gaps() {
        // Stride larger than the window leaves uncovered pixels.
        assert!(build_grid(128, 128, 32, 32, 48, 1).is_err());
    }

    #[test]
    fn grid_is_row_major() {
        let grid = build_grid(64, 64, 32, 32, 32, 1).unwrap();
        let order: Vec<(usize, usize)> = grid.windows().iter().map(|w| (w.top, w.left)).collect();
        assert_eq!(order, vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
    }

    #[test]
    fn crop_full_canvas_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = random_image(2, 6, 9, &mut rng);
        let win = WindowSpec::new(0, 0, 6, 9, 1);
        assert_eq!(crop(&z, &win), z);
    }

    #[test]
    fn crop_index_arithmetic() {
        let z = LatentImage::from_fn(1, 8, 8, |_, r, col| (r * 1000 + col) as f64);
        let win = WindowSpec::new(2, 3, 2, 2, 1);
        let patch = crop(&z, &win);
        assert_eq!(patch.data(), &[2003.0, 2004.0, 3003.0, 3004.0]);
    }

    #[test]
    fn crop_composes_with_offset_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_image(1, 16, 16, &mut rng);
        let outer = WindowSpec::new(3, 4, 10, 9, 1);
        let inner = WindowSpec::new(2, 1, 5, 6, 1);
        let two_step = crop(&crop(&z, &outer), &inner);
        let fused = crop(
            &z,
            &WindowSpec::new(outer.top + inner.top, outer.left + inner.left, 5, 6, 1),
        );
        assert_eq!(two_step, fused);
    }

    #[test]
    #[should_panic]
    fn crop_out_of_bounds_panics() {
        let z = LatentImage::zeros(1, 4, 4);
        crop(&z, &WindowSpec::new(2, 2, 4, 4, 1));
    }

    #[test]
    fn uncrop_single_full_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patch = random_image(1, 4, 4, &mut rng);
        let weights = WeightMatrix::uniform(4, 4);
        let mut acc = LatentImage::zeros(1, 4, 4);
        let mut wacc = vec![0.0; 16];
        uncrop_accumulate(
            &mut acc,
            &mut wacc,
            &patch,
            &weights,
            &WindowSpec::new(0, 0, 4, 4, 1),
        );
        assert_eq!(acc, patch);
        assert!(wacc.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn uncrop_twice_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patch = random_image(1, 4, 4, &mut rng);
        let weights = WeightMatrix::uniform(4, 4);
        let win = WindowSpec::new(0, 0, 4, 4, 1);
        let mut acc = LatentImage::zeros(1, 4, 4);
        let mut wacc = vec![0.0; 16];
        uncrop_accumulate(&mut acc, &mut wacc, &patch, &weights, &win);
        uncrop_accumulate(&mut acc, &mut wacc, &patch, &weights, &win);
        for (a, p) in acc.data().iter().zip(patch.data()) {
            assert!((a - 2.0 * p).abs() < 1e-15);
        }
        assert!(wacc.iter().all(|&w| w == 2.0));
    }

    #[test]
    fn disjoint_windows_merge_to_their_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p1 = random_image(1, 4, 4, &mut rng);
        let p2 = random_image(1, 4, 4, &mut rng);
        let w1 = WindowSpec::new(0, 0, 4, 4, 1);
        let w2 = WindowSpec::new(0, 4, 4, 4, 1);
        let weights = WeightMatrix::uniform(4, 4);
        let merged = md_merge(&[(w1, p1.clone()), (w2, p2.clone())], &weights, 1, 4, 8).unwrap();
        assert_eq!(crop(&merged, &w1), p1);
        assert_eq!(crop(&merged, &w2), p2);
    }

    #[test]
    fn single_full_canvas_window_merges_to_its_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_image(2, 5, 7, &mut rng);
        let win = WindowSpec::new(0, 0, 5, 7, 1);
        let weights = WeightMatrix::gaussian(5, 7, 0.2).unwrap();
        let merged = md_merge(&[(win, p.clone())], &weights, 2, 5, 7).unwrap();
        assert!(merged.max_abs_diff(&p) < 1e-15);
    }

    #[test]
    fn overlapping_windows_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_image(1, 4, 4, &mut rng);
        let q = random_image(1, 4, 4, &mut rng);
        let win = WindowSpec::new(0, 0, 4, 4, 1);
        let weights = WeightMatrix::uniform(4, 4);
        let merged = md_merge(&[(win, p.clone()), (win, q.clone())], &weights, 1, 4, 4).unwrap();
        for i in 0..16 {
            assert!((merged.data()[i] - (p.data()[i] + q.data()[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn merge_reports_uncovered_pixel() {
        let patch = LatentImage::zeros(1, 2, 2);
        let weights = WeightMatrix::uniform(2, 2);
        let err = md_merge(
            &[(WindowSpec::new(0, 0, 2, 2, 1), patch)],
            &weights,
            1,
            4,
            4,
        )
        .unwrap_err();
        match err {
            crate::error::Error::Coverage { row, col } => assert_eq!((row, col), (0, 2)),
            other => panic!("expected coverage error, got {other}"),
        }
    }

    /// Independent least-squares oracle: assemble the normal equations of
    /// Σ_i ‖√W_i ⊗ (F_i(z) − p_i)‖² explicitly and solve with a dense
    /// factorization.
    fn least_squares_oracle(
        patches: &[(WindowSpec, LatentImage)],
        weights: &WeightMatrix,
        channels: usize,
        h: usize,
        w: usize,
    ) -> LatentImage {
        let n = h * w;
        let mut out = LatentImage::zeros(channels, h, w);
        for c in 0..channels {
            let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
            let mut b = nalgebra::DVector::<f64>::zeros(n);
            for (win, patch) in patches {
                for r in 0..win.height {
                    for col in 0..win.width {
                        let weight = weights.get(r, col);
                        let pix = (win.top + r) * w + win.left + col;
                        a[(pix, pix)] += weight;
                        b[pix] += weight * patch.get(c, r, col);
                    }
                }
            }
            let solved = a.lu().solve(&b).expect("singular normal equations");
            for r in 0..h {
                for col in 0..w {
                    out.set(c, r, col, solved[r * w + col]);
                }
            }
        }
        out
    }

    /// Gradient of the merge objective at z: 2 Σ_i F_iᵀ(W_i ⊗ (F_i(z) − p_i)).
    fn objective_gradient(
        z: &LatentImage,
        patches: &[(WindowSpec, LatentImage)],
        weights: &WeightMatrix,
    ) -> LatentImage {
        let mut grad = LatentImage::zeros(z.channels(), z.height(), z.width());
        for (win, patch) in patches {
            for c in 0..z.channels() {
                for r in 0..win.height {
                    for col in 0..win.width {
                        let weight = weights.get(r, col);
                        let diff = z.get(c, win.top + r, win.left + col) - patch.get(c, r, col);
                        let i = grad.idx(c, win.top + r, win.left + col);
                        grad.data_mut()[i] += 2.0 * weight * diff;
                    }
                }
            }
        }
        grad
    }

    #[test]
    fn merge_matches_least_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            // Four mutually overlapping 6×6 windows covering the 8×8 canvas.
            let wins = [
                WindowSpec::new(0, 0, 6, 6, 1),
                WindowSpec::new(0, 2, 6, 6, 1),
                WindowSpec::new(2, 0, 6, 6, 1),
                WindowSpec::new(2, 2, 6, 6, 1),
            ];
            let patches: Vec<(WindowSpec, LatentImage)> = wins
                .iter()
                .map(|w| (*w, random_image(1, 6, 6, &mut rng)))
                .collect();
            let values: Vec<f64> = (0..36).map(|_| rng.random_range(0.1..2.0)).collect();
            let weights = WeightMatrix::from_values(6, 6, values).unwrap();
            let merged = md_merge(&patches, &weights, 1, 8, 8).unwrap();
            let oracle = least_squares_oracle(&patches, &weights, 1, 8, 8);
            assert!(merged.max_abs_diff(&oracle) <= 1e-6);
            assert!(objective_gradient(&merged, &patches, &weights).max_abs() <= 1e-9);
        }
    }

    #[test]
    fn lowres_window_halves_geometry() {
        let win = WindowSpec::new(32, 64, 64, 64, 2);
        let low = lowres_window(&win, 2);
        assert_eq!(low, WindowSpec::new(16, 32, 32, 32, 1));
        let origin = lowres_window(&WindowSpec::new(0, 0, 64, 64, 2), 2);
        assert_eq!(origin, WindowSpec::new(0, 0, 32, 32, 1));
    }

    #[test]
    fn crop_commutes_with_downsample_on_aligned_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random_image(2, 16, 24, &mut rng);
        let win = WindowSpec::new(4, 8, 8, 12, 2);
        let a = crop(&downsample(&z, 2), &lowres_window(&win, 2));
        let b = downsample(&crop(&z, &win), 2);
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn downsample_examples() {
        let constant = LatentImage::from_fn(1, 4, 4, |_, _, _| 3.25);
        assert!(downsample(&constant, 2)
            .data()
            .iter()
            .all(|&v| (v - 3.25).abs() < 1e-15));

        let block = LatentImage::from_vec(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(downsample(&block, 2).data(), &[4.0]);
    }

    #[test]
    fn downsample_transpose_is_adjoint() {
        // ⟨ds(x), y⟩ = ⟨x, dsᵀ(y)⟩ for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_image(1, 8, 8, &mut rng);
        let y = random_image(1, 4, 4, &mut rng);
        let lhs: f64 = downsample(&x, 2)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(downsample_transpose(&y, 2).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gaussian_weights_taper() {
        let w = WeightMatrix::gaussian(9, 9, 0.1).unwrap();
        assert!((w.get(4, 4) - 1.0).abs() < 1e-12);
        assert!((w.get(4, 0) - 0.1).abs() < 1e-12);
        assert!((w.get(0, 4) - 0.1).abs() < 1e-12);
        assert!((w.get(0, 0) - 0.01).abs() < 1e-12);
        assert!(WeightMatrix::gaussian(4, 4, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn downsample_is_linear_and_mean_preserving(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(1, 8, 8, &mut rng);
            let y = random_image(1, 8, 8, &mut rng);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));

            let mut combo = x.clone();
            combo.scale(a);
            combo.axpy(b, &y);
            let lhs = downsample(&combo, 2);
            let mut rhs = downsample(&x, 2);
            rhs.scale(a);
            rhs.axpy(b, &downsample(&y, 2));
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            prop_assert!((downsample(&x, 2).mean() - x.mean()).abs() < 1e-12);
        }

        #[test]
        fn merge_invariant_under_weight_rescaling(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wins = [
                WindowSpec::new(0, 0, 4, 4, 1),
                WindowSpec::new(2, 2, 4, 4, 1),
                WindowSpec::new(4, 4, 4, 4, 1),
                WindowSpec::new(0, 4, 4, 4, 1),
                WindowSpec::new(4, 0, 4, 4, 1),
            ];
            let patches: Vec<(WindowSpec, LatentImage)> =
                wins.iter().map(|w| (*w, random_image(1, 4, 4, &mut rng))).collect();
            let base = WeightMatrix::uniform(4, 4);
            let scaled = WeightMatrix::from_values(
                4, 4, base.values().iter().map(|v| v * scale).collect()).unwrap();
            let a = md_merge(&patches, &base, 1, 8, 8).unwrap();
            let b = md_merge(&patches, &scaled, 1, 8, 8).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn singly_covered_pixels_pass_through(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Two windows overlapping in the middle 4 columns of an 8-wide strip.
            let w1 = WindowSpec::new(0, 0, 4, 6, 1);
            let w2 = WindowSpec::new(0, 2, 4, 6, 1);
            let p1 = random_image(1, 4, 6, &mut rng);
            let p2 = random_image(1, 4, 6, &mut rng);
            let weights = WeightMatrix::gaussian(4, 6, 0.3).unwrap();
            let merged =
                md_merge(&[(w1, p1.clone()), (w2, p2.clone())], &weights, 1, 4, 8).unwrap();
            // Columns 0..2 are covered only by w1; columns 6..8 only by w2.
            for r in 0..4 {
                for col in 0..2 {
                    prop_assert!((merged.get(0, r, col) - p1.get(0, r, col)).abs() < 1e-12);
                }
                for col in 6..8 {
                    prop_assert!((merged.get(0, r, col) - p2.get(0, r, col - 2)).abs() < 1e-12);
                }
            }
        }
    }
}
