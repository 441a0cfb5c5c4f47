//! Exact noise prediction under a Gaussian-mixture prior.
//!
//! With the forward process x_t = √ᾱ·x₀ + √(1−ᾱ)·ε and a mixture prior on
//! x₀, the optimal noise predictor is ε*(x) = (x − √ᾱ·E[x₀|x]) / √(1−ᾱ),
//! where E[x₀|x] is the posterior mean: responsibilities under the marginal
//! N(√ᾱ·μ_k, (ᾱσ_k² + 1−ᾱ)·I) times the per-component linear-Gaussian
//! posterior means. Both the prediction and its Jacobian are closed-form.

use crate::latent::LatentImage;

#[derive(Debug, Clone)]
pub struct GmmComponent {
    /// Mixture weight π_k.
    pub weight: f64,
    /// Window-shaped mean image μ_k.
    pub mean: LatentImage,
    /// Isotropic variance σ_k².
    pub sigma2: f64,
}

/// A mixture prior over clean windows.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Self {
        assert!(
            !components.is_empty(),
            "mixture needs at least one component"
        );
        let shape = components[0].mean.shape();
        assert!(
            components.iter().all(|c| c.mean.shape() == shape),
            "all component means must share one shape"
        );
        assert!(
            components.iter().all(|c| c.sigma2 > 0.0 && c.weight > 0.0),
            "component weights and variances must be positive"
        );
        let total: f64 = components.iter().map(|c| c.weight).sum();
        assert!(
            (total - 1.0).abs() <= 1e-12,
            "mixture weights must sum to 1, got {total}"
        );
        GmmPrior { components }
    }

    /// Equal-weight mixture over the given mean images with shared variance.
    pub fn equal_weight(means: Vec<LatentImage>, sigma2: f64) -> Self {
        let k = means.len();
        assert!(k > 0);
        let weight = 1.0 / k as f64;
        // Make the weights sum to exactly 1 regardless of rounding.
        let mut components: Vec<GmmComponent> = means
            .into_iter()
            .map(|mean| GmmComponent {
                weight,
                mean,
                sigma2,
            })
            .collect();
        let partial: f64 = weight * (k - 1) as f64;
        components.last_mut().unwrap().weight = 1.0 - partial;
        GmmPrior { components }
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn window_shape(&self) -> (usize, usize, usize) {
        self.components[0].mean.shape()
    }
}

/// Intermediate quantities shared by the prediction and its vjp.
struct Posterior {
    /// Normalized responsibilities r_k.
    resp: Vec<f64>,
    /// Posterior-mean shrinkage factor c_k = √ᾱσ_k² / (ᾱσ_k² + 1−ᾱ).
    shrink: Vec<f64>,
    /// Marginal variances v_k = ᾱσ_k² + 1−ᾱ.
    var: Vec<f64>,
}

fn posterior(x: &LatentImage, alpha_bar: f64, prior: &GmmPrior) -> Posterior {
    assert!(
        alpha_bar > 0.0 && alpha_bar < 1.0,
        "alpha_bar must be in (0, 1) when the denoiser is called, got {alpha_bar}"
    );
    let sqrt_ab = alpha_bar.sqrt();
    let dim = x.data().len() as f64;
    let k = prior.components.len();

    let mut log_w = Vec::with_capacity(k);
    let mut var = Vec::with_capacity(k);
    let mut shrink = Vec::with_capacity(k);
    for comp in &prior.components {
        let v = alpha_bar * comp.sigma2 + (1.0 - alpha_bar);
        let sq_dist: f64 = x
            .data()
            .iter()
            .zip(comp.mean.data())
            .map(|(xi, mi)| {
                let d = xi - sqrt_ab * mi;
                d * d
            })
            .sum();
        log_w.push(
            comp.weight.ln()
                - 0.5 * dim * (2.0 * std::f64::consts::PI * v).ln()
                - sq_dist / (2.0 * v),
        );
        var.push(v);
        shrink.push(sqrt_ab * comp.sigma2 / v);
    }
    // Log-sum-exp normalization.
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
    let total: f64 = resp.iter().sum();
    for r in resp.iter_mut() {
        *r /= total;
    }
    Posterior { resp, shrink, var }
}

/// ε*(x) under the mixture prior at noise level ᾱ_t.
pub fn gmm_predict_noise(x: &LatentImage, alpha_bar: f64, prior: &GmmPrior) -> LatentImage {
    let post = posterior(x, alpha_bar, prior);
    let sqrt_ab = alpha_bar.sqrt();
    let sqrt_om = (1.0 - alpha_bar).sqrt();

    // Posterior mean Σ_k r_k (μ_k + c_k (x − √ᾱ μ_k)).
    let mut mean = LatentImage::zeros(x.channels(), x.height(), x.width());
    for (ki, comp) in prior.components.iter().enumerate() {
        let (r, c) = (post.resp[ki], post.shrink[ki]);
        if r == 0.0 {
            continue;
        }
        for (out, (xi, mi)) in mean
            .data_mut()
            .iter_mut()
            .zip(x.data().iter().zip(comp.mean.data()))
        {
            *out += r * (mi + c * (xi - sqrt_ab * mi));
        }
    }

    let mut eps = x.clone();
    eps.axpy(-sqrt_ab, &mean);
    eps.scale(1.0 / sqrt_om);
    eps
}

/// Jᵀ·cotangent for the Jacobian J of [`gmm_predict_noise`] at `x`, including
/// the responsibility-gradient terms.
pub fn gmm_vjp(
    x: &LatentImage,
    alpha_bar: f64,
    prior: &GmmPrior,
    cotangent: &LatentImage,
) -> LatentImage {
    assert_eq!(cotangent.shape(), x.shape(), "cotangent shape mismatch");
    let post = posterior(x, alpha_bar, prior);
    let sqrt_ab = alpha_bar.sqrt();
    let sqrt_om = (1.0 - alpha_bar).sqrt();
    let k = prior.components.len();
    let n = x.data().len();

    // g_k = −(x − √ᾱ μ_k)/v_k drives the responsibility gradient
    // ∇r_k = r_k (g_k − Σ_j r_j g_j). The posterior-mean Jacobian is
    // J_m = (Σ_k r_k c_k)·I + Σ_k m_k ∇r_kᵀ, so
    // J_mᵀu = (Σ_k r_k c_k)·u + Σ_k r_k (g_k − ḡ)(m_k·u).
    let mut g = vec![vec![0.0f64; n]; k];
    let mut m = vec![vec![0.0f64; n]; k];
    for (ki, comp) in prior.components.iter().enumerate() {
        let (v, c) = (post.var[ki], post.shrink[ki]);
        for i in 0..n {
            let diff = x.data()[i] - sqrt_ab * comp.mean.data()[i];
            g[ki][i] = -diff / v;
            m[ki][i] = comp.mean.data()[i] + c * diff;
        }
    }
    let mut g_bar = vec![0.0f64; n];
    for (gk, &r) in g.iter().zip(post.resp.iter()) {
        for (acc, gi) in g_bar.iter_mut().zip(gk.iter()) {
            *acc += r * gi;
        }
    }

    let iso: f64 = post
        .resp
        .iter()
        .zip(post.shrink.iter())
        .map(|(r, c)| r * c)
        .sum();
    let mut jm_t_u: Vec<f64> = cotangent.data().iter().map(|u| iso * u).collect();
    for ((gk, mk), &r) in g.iter().zip(m.iter()).zip(post.resp.iter()) {
        if r == 0.0 {
            continue;
        }
        let m_dot_u: f64 = mk.iter().zip(cotangent.data()).map(|(a, b)| a * b).sum();
        for ((acc, gi), bar) in jm_t_u.iter_mut().zip(gk.iter()).zip(g_bar.iter()) {
            *acc += r * (gi - bar) * m_dot_u;
        }
    }

    // J_εᵀu = (u − √ᾱ J_mᵀu)/√(1−ᾱ).
    let data: Vec<f64> = cotangent
        .data()
        .iter()
        .zip(jm_t_u.iter())
        .map(|(u, j)| (u - sqrt_ab * j) / sqrt_om)
        .collect();
    LatentImage::from_vec(x.channels(), x.height(), x.width(), data).unwrap()
}

#[cfg(test)]
pub(crate) fn responsibilities(x: &LatentImage, alpha_bar: f64, prior: &GmmPrior) -> Vec<f64> {
    posterior(x, alpha_bar, prior).resp
}
