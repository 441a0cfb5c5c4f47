//! Desk-scale evaluation: seam discontinuity, cross-scale consistency,
//! layout coherence, and a Fréchet distance on raw patch statistics.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::latent::LatentImage;
use crate::tiling::{downsample, WindowGrid};

/// One named metric value with its sample count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub samples: usize,
    /// Free-form annotation, e.g. covariance regularization applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// A bundle of metric values tied to the generating configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64, samples: usize) {
        self.metrics.push(MetricEntry {
            name: name.into(),
            value,
            samples,
            note: None,
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV, one row per metric: name,value,samples.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,samples\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{}\n", m.name, m.value, m.samples));
        }
        out
    }
}

/// FNV-1a digest of the canonical configuration text, for tying reports to
/// the run that produced them.
pub fn config_digest(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Mean squared finite difference across pixel pairs straddling window
/// boundaries, minus the same statistic over all non-boundary adjacent
/// pairs. Near zero for seamless outputs; zero exactly on constant images.
pub fn seam_energy(z: &LatentImage, grid: &WindowGrid) -> f64 {
    let (canvas_h, canvas_w) = grid.canvas_size();
    assert_eq!(
        (z.height(), z.width()),
        (canvas_h, canvas_w),
        "grid does not match canvas"
    );
    let (boundary_rows, boundary_cols) = grid.interior_boundaries();
    let is_boundary_row = |r: usize| boundary_rows.binary_search(&r).is_ok();
    let is_boundary_col = |c: usize| boundary_cols.binary_search(&c).is_ok();

    let mut boundary_sum = 0.0;
    let mut boundary_n = 0usize;
    let mut interior_sum = 0.0;
    let mut interior_n = 0usize;
    for c in 0..z.channels() {
        // Vertical neighbors straddle a horizontal boundary when the lower
        // pixel's row is a window edge; likewise for horizontal neighbors.
        for r in 0..z.height() - 1 {
            let straddles = is_boundary_row(r + 1);
            for col in 0..z.width() {
                let d = z.get(c, r + 1, col) - z.get(c, r, col);
                if straddles {
                    boundary_sum += d * d;
                    boundary_n += 1;
                } else {
                    interior_sum += d * d;
                    interior_n += 1;
                }
            }
        }
        for r in 0..z.height() {
            for col in 0..z.width() - 1 {
                let d = z.get(c, r, col + 1) - z.get(c, r, col);
                if is_boundary_col(col + 1) {
                    boundary_sum += d * d;
                    boundary_n += 1;
                } else {
                    interior_sum += d * d;
                    interior_n += 1;
                }
            }
        }
    }
    let boundary = if boundary_n > 0 {
        boundary_sum / boundary_n as f64
    } else {
        0.0
    };
    let interior = if interior_n > 0 {
        interior_sum / interior_n as f64
    } else {
        0.0
    };
    boundary - interior
}

/// Mean squared error between the downsampled fine canvas and the coarse
/// reference: the cross-scale objective measured after the fact.
pub fn cross_scale_consistency(
    z_fine: &LatentImage,
    z_ref: &LatentImage,
    factors: &[usize],
) -> f64 {
    let mut reduced = z_fine.clone();
    for &f in factors {
        reduced = downsample(&reduced, f);
    }
    assert_eq!(reduced.shape(), z_ref.shape(), "reference shape mismatch");
    reduced.sum_sq_diff(z_ref) / reduced.data().len() as f64
}

/// Per-column horizon-row estimates and the columns where estimation failed.
pub struct CoherenceOutcome {
    pub variance: f64,
    pub columns_used: usize,
    pub columns_excluded: usize,
}

/// Variance (pixels²) of the per-column horizon-row estimate for two-band
/// scenes. The estimator picks, per column, the split row minimizing the
/// squared mismatch against (sky above, ground below). Lower is more
/// coherent; the exact template scores 0.
pub fn layout_coherence(z: &LatentImage, sky: f64, ground: f64) -> CoherenceOutcome {
    let h = z.height();
    let mut estimates: Vec<f64> = Vec::with_capacity(z.width());
    let mut excluded = 0usize;
    for col in 0..z.width() {
        // cost(r) = Σ_{y<r}(z−sky)² + Σ_{y>=r}(z−ground)², summed over
        // channels, minimized over r in 0..=H via prefix sums.
        let mut sky_cost = vec![0.0f64; h + 1];
        let mut ground_cost = vec![0.0f64; h + 1];
        for r in 0..h {
            let mut ds = 0.0;
            let mut dg = 0.0;
            for c in 0..z.channels() {
                let v = z.get(c, r, col);
                ds += (v - sky) * (v - sky);
                dg += (v - ground) * (v - ground);
            }
            sky_cost[r + 1] = sky_cost[r] + ds;
            ground_cost[r + 1] = ground_cost[r] + dg;
        }
        let total_ground = ground_cost[h];
        let mut best_r = 0usize;
        let mut best = f64::INFINITY;
        for r in 0..=h {
            let cost = sky_cost[r] + (total_ground - ground_cost[r]);
            if cost < best {
                best = cost;
                best_r = r;
            }
        }
        if best.is_finite() {
            estimates.push(best_r as f64);
        } else {
            excluded += 1;
        }
    }
    if estimates.is_empty() {
        return CoherenceOutcome {
            variance: f64::NAN,
            columns_used: 0,
            columns_excluded: excluded,
        };
    }
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let variance = estimates
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / estimates.len() as f64;
    CoherenceOutcome {
        variance,
        columns_used: estimates.len(),
        columns_excluded: excluded,
    }
}

/// Gaussian Fréchet distance ‖μa−μb‖² + tr(Σa + Σb − 2(ΣaΣb)^{1/2}), with
/// the PSD square root taken by symmetric eigendecomposition and negative
/// eigenvalues clamped at zero.
pub fn frechet_gaussian(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let mean_term = (mean_a - mean_b).norm_squared();
    // tr((ΣaΣb)^{1/2}) = tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}), which is symmetric.
    let root_a = psd_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let cross = psd_trace_sqrt(&inner);
    mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn psd_trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(m).symmetric_eigen();
    eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Result of [`frechet_patch_distance`].
#[derive(Debug, Clone, Copy)]
pub struct FrechetOutcome {
    pub value: f64,
    /// Whether near-singular covariances were ridge-regularized.
    pub regularized: bool,
    /// Patches actually drawn per set.
    pub samples_per_set: usize,
}

/// Fréchet distance between the raw-patch statistics of two image sets.
///
/// At least `count` square patches of side `patch` are drawn per set
/// (split evenly across images), flattened to channels·patch² vectors and
/// summarized by mean and covariance. Each image's patch positions come
/// from a sub-sampler keyed on the image content and the seed, and partial
/// moments are combined in content order, so the metric does not depend on
/// the order of images within a set. Near-singular covariances are
/// ridge-regularized and reported.
pub fn frechet_patch_distance(
    set_a: &[LatentImage],
    set_b: &[LatentImage],
    patch: usize,
    count: usize,
    seed: u64,
) -> FrechetOutcome {
    assert!(
        !set_a.is_empty() && !set_b.is_empty(),
        "patch sets must be non-empty"
    );
    assert!(count >= 2, "need at least two patches per set");
    let (mean_a, cov_a, n_a) = patch_moments(set_a, patch, count, seed);
    let (mean_b, cov_b, n_b) = patch_moments(set_b, patch, count, seed);

    let floor = 1e-10;
    let needs_ridge = |cov: &DMatrix<f64>| {
        symmetrize(cov)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .any(|v| *v < floor)
    };
    let regularized = needs_ridge(&cov_a) || needs_ridge(&cov_b);
    let (cov_a, cov_b) = if regularized {
        let ridge = DMatrix::identity(cov_a.nrows(), cov_a.ncols()) * 1e-6;
        (&cov_a + &ridge, &cov_b + &ridge)
    } else {
        (cov_a, cov_b)
    };
    FrechetOutcome {
        value: frechet_gaussian(&mean_a, &cov_a, &mean_b, &cov_b),
        regularized,
        samples_per_set: n_a.min(n_b),
    }
}

fn image_key(img: &LatentImage, seed: u64) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for v in img.data() {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

fn patch_moments(
    set: &[LatentImage],
    patch: usize,
    count: usize,
    seed: u64,
) -> (DVector<f64>, DMatrix<f64>, usize) {
    let channels = set[0].channels();
    let dim = channels * patch * patch;
    let per_image = count.div_ceil(set.len());

    // Per-image partial sums, keyed by content so combination order is
    // independent of the input order.
    let mut partials: Vec<(u64, DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(set.len());
    for img in set {
        assert!(
            img.height() >= patch && img.width() >= patch,
            "patch {patch} larger than image {}x{}",
            img.height(),
            img.width()
        );
        assert_eq!(
            img.channels(),
            channels,
            "mixed channel counts in patch set"
        );
        let key = image_key(img, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut sum = DVector::<f64>::zeros(dim);
        let mut sum_sq = DMatrix::<f64>::zeros(dim, dim);
        let mut vec = DVector::<f64>::zeros(dim);
        for _ in 0..per_image {
            let top = rng.random_range(0..=img.height() - patch);
            let left = rng.random_range(0..=img.width() - patch);
            let mut j = 0;
            for c in 0..channels {
                for r in 0..patch {
                    for col in 0..patch {
                        vec[j] = img.get(c, top + r, left + col);
                        j += 1;
                    }
                }
            }
            sum += &vec;
            sum_sq += &vec * vec.transpose();
        }
        partials.push((key, sum, sum_sq));
    }
    partials.sort_by_key(|(key, _, _)| *key);

    let n = (per_image * set.len()) as f64;
    let mut sum = DVector::<f64>::zeros(dim);
    let mut sum_sq = DMatrix::<f64>::zeros(dim, dim);
    for (_, s1, s2) in &partials {
        sum += s1;
        sum_sq += s2;
    }
    let mean = &sum / n;
    let cov = (sum_sq - &mean * mean.transpose() * n) / (n - 1.0);
    (mean, cov, per_image * set.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::build_grid;

    fn random_image(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> LatentImage {
        LatentImage::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn seam_energy_zero_on_constant_image() {
        let grid = build_grid(8, 8, 4, 4, 4, 1).unwrap();
        let z = LatentImage::from_fn(1, 8, 8, |_, _, _| 2.5);
        assert_eq!(seam_energy(&z, &grid), 0.0);
    }

    #[test]
    fn seam_energy_on_aligned_step() {
        // 8×8 canvas, 2×2 non-overlapping 4×4 windows; a step of height s
        // across the row boundary contributes s² on each of the 8 vertical
        // pairs straddling it; boundary pairs total 16 (8 vertical + 8
        // horizontal with zero difference), interior pairs are all zero.
        let grid = build_grid(8, 8, 4, 4, 4, 1).unwrap();
        let step = 3.0;
        let z = LatentImage::from_fn(1, 8, 8, |_, r, _| if r < 4 { 0.0 } else { step });
        let expect = (8.0 * step * step) / 16.0;
        assert!((seam_energy(&z, &grid) - expect).abs() < 1e-12);
    }

    #[test]
    fn seam_energy_penalizes_boundary_discontinuity_not_texture() {
        // Uniform texture has equal boundary and interior statistics.
        let grid = build_grid(8, 8, 4, 4, 4, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let z = random_image(1, 8, 8, &mut rng);
        let value = seam_energy(&z, &grid);
        assert!(
            value.abs() < 2.0,
            "texture-only seam energy should be small, got {value}"
        );
    }

    #[test]
    fn cross_scale_identity_and_offset() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(51);
        let z = random_image(1, 16, 16, &mut rng);
        let reference = downsample(&z, 2);
        assert_eq!(cross_scale_consistency(&z, &reference, &[2]), 0.0);

        let mut shifted = reference.clone();
        for v in shifted.data_mut() {
            *v += 0.75;
        }
        let mse = cross_scale_consistency(&z, &shifted, &[2]);
        assert!((mse - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn coherence_zero_on_exact_template() {
        let (sky, ground) = (1.5, -1.5);
        let z = LatentImage::from_fn(1, 16, 32, |_, r, _| if r < 8 { sky } else { ground });
        let out = layout_coherence(&z, sky, ground);
        assert_eq!(out.variance, 0.0);
        assert_eq!(out.columns_used, 32);
        assert_eq!(out.columns_excluded, 0);
    }

    #[test]
    fn coherence_of_split_horizon_is_offset_variance() {
        // Horizon at row 8 on the left half, row 16 on the right half:
        // estimates {8, 16} in equal numbers have variance 16.
        let (sky, ground) = (1.0, -1.0);
        let z = LatentImage::from_fn(1, 32, 32, |_, r, col| {
            let split = if col < 16 { 8 } else { 16 };
            if r < split {
                sky
            } else {
                ground
            }
        });
        let out = layout_coherence(&z, sky, ground);
        assert!((out.variance - 16.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_gaussian_closed_form() {
        // Unit-variance isotropic Gaussians offset by d in every coordinate
        // of a p²-dimensional patch: distance = p²·d².
        let p2 = 64;
        let d = 0.35;
        let mean_a = DVector::from_element(p2, 0.0);
        let mean_b = DVector::from_element(p2, d);
        let cov = DMatrix::<f64>::identity(p2, p2);
        let dist = frechet_gaussian(&mean_a, &cov, &mean_b, &cov);
        assert!((dist - p2 as f64 * d * d).abs() < 1e-8);
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(52);
        let set: Vec<LatentImage> = (0..3).map(|_| random_image(1, 16, 16, &mut rng)).collect();
        let out = frechet_patch_distance(&set, &set, 4, 200, 9);
        assert!(out.samples_per_set >= 200);
        assert!(out.value.abs() < 1e-6, "distance {}", out.value);
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        let a: Vec<LatentImage> = (0..2).map(|_| random_image(1, 12, 12, &mut rng)).collect();
        let b: Vec<LatentImage> = (0..2).map(|_| random_image(1, 12, 12, &mut rng)).collect();
        let ab = frechet_patch_distance(&a, &b, 4, 300, 11).value;
        let ba = frechet_patch_distance(&b, &a, 4, 300, 11).value;
        assert!((ab - ba).abs() < 1e-8);
    }

    #[test]
    fn frechet_reports_regularization_on_degenerate_sets() {
        // Constant images give a singular covariance.
        let a = vec![LatentImage::from_fn(1, 8, 8, |_, _, _| 1.0)];
        let b = vec![LatentImage::from_fn(1, 8, 8, |_, _, _| 1.0)];
        let out = frechet_patch_distance(&a, &b, 4, 50, 13);
        assert!(out.regularized);
        assert!(out.value.abs() < 1e-6);
    }

    #[test]
    fn frechet_ignores_image_order_within_sets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(54);
        let a: Vec<LatentImage> = (0..4).map(|_| random_image(1, 10, 10, &mut rng)).collect();
        let b: Vec<LatentImage> = (0..4).map(|_| random_image(1, 10, 10, &mut rng)).collect();
        let d1 = frechet_patch_distance(&a, &b, 3, 400, 21).value;
        let a_rev: Vec<LatentImage> = a.iter().rev().cloned().collect();
        let b_rev: Vec<LatentImage> = b.iter().rev().cloned().collect();
        let d2 = frechet_patch_distance(&a_rev, &b_rev, 3, 400, 21).value;
        assert_eq!(d1, d2);
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(config_digest("abc"), config_digest("abc"));
        assert_ne!(config_digest("abc"), config_digest("abd"));
    }

    #[test]
    fn report_round_trips() {
        let mut report = MetricReport {
            config_digest: config_digest("{}"),
            seeds: vec![1, 2],
            metrics: Vec::new(),
        };
        report.push("seam_energy", 0.25, 1);
        let parsed: MetricReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(parsed.metrics[0].name, "seam_energy");
        assert!(report.to_csv().contains("seam_energy,0.25,1"));
    }
}
