//! Score models: providers of the gradient of the log marginal density of
//! the diffused latent, `grad log p(z_t)`.
//!
//! Each model knows its own diffused form in closed form: diffusing a
//! density with `z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps` turns a
//! Gaussian `N(mu, Sigma)` into `N(sqrt(alpha_bar) mu, alpha_bar Sigma +
//! (1 - alpha_bar) I)`, and mixtures component-wise. A sample-bank KDE is a
//! uniform mixture over its bank with a diagonal bandwidth, so its diffused
//! score is exact as well.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::physics::SpinMap;

/// Gradient of the log density of the diffused latent at one voxel.
///
/// `alpha_bar` is the cumulative signal fraction of the schedule at the
/// queried step (1 at t = 0). Implementations must be pure so voxels can be
/// evaluated concurrently.
pub trait ScoreModel: Send + Sync {
    fn score_at(&self, v: [f64; 3], alpha_bar: f64) -> [f64; 3];

    /// Score together with its Jacobian `d score / d z_t`; the exact-Jacobian
    /// guidance path needs both.
    fn score_with_jacobian_at(&self, v: [f64; 3], alpha_bar: f64) -> ([f64; 3], [[f64; 3]; 3]);
}

fn spd_check(cov: &Matrix3<f64>, what: &'static str) -> Result<()> {
    if (cov - cov.transpose()).abs().max() > 1e-9 {
        return Err(Error::validation(what, "covariance must be symmetric"));
    }
    if cov.cholesky().is_none() {
        return Err(Error::validation(what, "covariance must be positive definite"));
    }
    Ok(())
}

fn diffused_cov(cov: &Matrix3<f64>, alpha_bar: f64) -> Matrix3<f64> {
    cov * alpha_bar + Matrix3::identity() * (1.0 - alpha_bar)
}

/// Exact score of a Gaussian prior `N(mean, cov)` in normalized space:
/// `-Sigma_t^{-1} (z_t - sqrt(alpha_bar) mean)` with
/// `Sigma_t = alpha_bar cov + (1 - alpha_bar) I`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
}

impl GaussianScore {
    pub fn new(mean: [f64; 3], cov: [[f64; 3]; 3]) -> Result<Self> {
        let cov = Matrix3::from_fn(|r, c| cov[r][c]);
        spd_check(&cov, "gaussian score")?;
        Ok(GaussianScore {
            mean: Vector3::from(mean),
            cov,
        })
    }

    pub fn isotropic(mean: [f64; 3], var: f64) -> Result<Self> {
        Self::new(
            mean,
            [[var, 0.0, 0.0], [0.0, var, 0.0], [0.0, 0.0, var]],
        )
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean.into()
    }

    pub fn cov(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = self.cov[(r, c)];
            }
        }
        out
    }
}

impl ScoreModel for GaussianScore {
    fn score_at(&self, v: [f64; 3], alpha_bar: f64) -> [f64; 3] {
        let sigma_t = diffused_cov(&self.cov, alpha_bar);
        let gap = Vector3::from(v) - self.mean * alpha_bar.sqrt();
        let s = -sigma_t
            .cholesky()
            .expect("diffused covariance is positive definite")
            .solve(&gap);
        s.into()
    }

    fn score_with_jacobian_at(&self, v: [f64; 3], alpha_bar: f64) -> ([f64; 3], [[f64; 3]; 3]) {
        let sigma_t = diffused_cov(&self.cov, alpha_bar);
        let chol = sigma_t
            .cholesky()
            .expect("diffused covariance is positive definite");
        let precision = chol.inverse();
        let gap = Vector3::from(v) - self.mean * alpha_bar.sqrt();
        let s = -precision * gap;
        let mut jac = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                jac[r][c] = -precision[(r, c)];
            }
        }
        (s.into(), jac)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: [f64; 3],
    pub cov: [[f64; 3]; 3],
}

/// Score of a Gaussian mixture prior; each component diffuses independently
/// and the score is the responsibility-weighted sum of component scores.
#[derive(Debug, Clone)]
pub struct GmmScore {
    log_weights: Vec<f64>,
    means: Vec<Vector3<f64>>,
    covs: Vec<Matrix3<f64>>,
}

impl GmmScore {
    pub fn new(components: &[GmmComponent]) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::validation("gmm score", "needs at least one component"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::validation("gmm score", "weights must sum to a positive value"));
        }
        let mut log_weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for comp in components {
            if !(comp.weight > 0.0) {
                return Err(Error::validation("gmm score", "component weights must be positive"));
            }
            let cov = Matrix3::from_fn(|r, c| comp.cov[r][c]);
            spd_check(&cov, "gmm score")?;
            log_weights.push((comp.weight / total).ln());
            means.push(Vector3::from(comp.mean));
            covs.push(cov);
        }
        Ok(GmmScore {
            log_weights,
            means,
            covs,
        })
    }

    /// Responsibilities, per-component scores, and precisions at `v`.
    fn parts(&self, v: [f64; 3], alpha_bar: f64) -> (Vec<f64>, Vec<Vector3<f64>>, Vec<Matrix3<f64>>) {
        let v = Vector3::from(v);
        let k = self.means.len();
        let mut log_post = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        let mut precisions = Vec::with_capacity(k);
        for i in 0..k {
            let sigma_t = diffused_cov(&self.covs[i], alpha_bar);
            let chol = sigma_t
                .cholesky()
                .expect("diffused covariance is positive definite");
            let precision = chol.inverse();
            let gap = v - self.means[i] * alpha_bar.sqrt();
            let maha = gap.dot(&(precision * gap));
            let log_det = 2.0 * chol.l().diagonal().map(|d| d.ln()).sum();
            log_post.push(self.log_weights[i] - 0.5 * (maha + log_det));
            scores.push(-precision * gap);
            precisions.push(precision);
        }
        let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut gamma: Vec<f64> = log_post
            .iter()
            .map(|lp| {
                let w = (lp - max).exp();
                total += w;
                w
            })
            .collect();
        for g in gamma.iter_mut() {
            *g /= total;
        }
        (gamma, scores, precisions)
    }
}

impl ScoreModel for GmmScore {
    fn score_at(&self, v: [f64; 3], alpha_bar: f64) -> [f64; 3] {
        let (gamma, scores, _) = self.parts(v, alpha_bar);
        let mut s = Vector3::zeros();
        for (g, sk) in gamma.iter().zip(&scores) {
            s += sk * *g;
        }
        s.into()
    }

    fn score_with_jacobian_at(&self, v: [f64; 3], alpha_bar: f64) -> ([f64; 3], [[f64; 3]; 3]) {
        let (gamma, scores, precisions) = self.parts(v, alpha_bar);
        let mut s = Vector3::zeros();
        for (g, sk) in gamma.iter().zip(&scores) {
            s += sk * *g;
        }
        // d s / d z = sum_k gamma_k [ -P_k + s_k (s_k - s)^T ]
        let mut jac = Matrix3::zeros();
        for i in 0..gamma.len() {
            jac += (scores[i] * (scores[i] - s).transpose() - precisions[i]) * gamma[i];
        }
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = jac[(r, c)];
            }
        }
        (s.into(), out)
    }
}

/// Kernel density estimate over a bank of normalized spin-property samples,
/// with a per-channel diagonal Gaussian bandwidth (Scott's rule by default).
///
/// Under diffusion every bank point becomes an isotropic-plus-bandwidth
/// Gaussian, so the KDE score stays exact at every step; responsibilities
/// are computed with the usual max-shifted softmax.
#[derive(Debug, Clone)]
pub struct KdeScore {
    bank: Vec<[f64; 3]>,
    bandwidth2: [f64; 3],
}

impl KdeScore {
    /// Build from normalized samples. `bandwidth_scale` multiplies the
    /// Scott's-rule per-channel bandwidth; `max_bank` caps the bank size by
    /// deterministic striding.
    pub fn from_samples(
        samples: &[[f64; 3]],
        bandwidth_scale: f64,
        max_bank: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("kde score", "empty sample bank"));
        }
        if !(bandwidth_scale > 0.0 && bandwidth_scale.is_finite()) {
            return Err(Error::validation(
                "kde score",
                format!("bandwidth scale {} must be positive", bandwidth_scale),
            ));
        }
        let max_bank = max_bank.max(1);
        let stride = samples.len().div_ceil(max_bank);
        let bank: Vec<[f64; 3]> = samples.iter().step_by(stride).copied().collect();

        let n = bank.len() as f64;
        let mut mean = [0.0; 3];
        for s in &bank {
            for c in 0..3 {
                mean[c] += s[c];
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = [0.0; 3];
        for s in &bank {
            for c in 0..3 {
                let d = s[c] - mean[c];
                var[c] += d * d;
            }
        }
        // Scott's rule in 3 dimensions: h_c = sigma_c n^(-1/7).
        let scott = n.powf(-1.0 / 7.0);
        let mut bandwidth2 = [0.0; 3];
        for c in 0..3 {
            let sigma = (var[c] / (n - 1.0).max(1.0)).sqrt();
            let h = (sigma * scott * bandwidth_scale).max(1e-3);
            bandwidth2[c] = h * h;
        }
        Ok(KdeScore { bank, bandwidth2 })
    }

    /// Build from a spin map's voxels (normalized with `normalizer`),
    /// including background voxels so the prior covers empty space.
    pub fn from_spinmap(
        map: &SpinMap,
        normalizer: &crate::diffusion::Normalizer,
        bandwidth_scale: f64,
        max_bank: usize,
    ) -> Result<Self> {
        let samples: Vec<[f64; 3]> = (0..map.n_voxels())
            .map(|i| normalizer.normalize_sample(map.voxel(i)))
            .collect();
        Self::from_samples(&samples, bandwidth_scale, max_bank)
    }

    pub fn bank_len(&self) -> usize {
        self.bank.len()
    }

    pub fn bank(&self) -> &[[f64; 3]] {
        &self.bank
    }

    /// Two-pass accumulation shared by score and Jacobian evaluation.
    #[inline]
    fn accumulate(
        &self,
        v: [f64; 3],
        alpha_bar: f64,
        mut with_component: impl FnMut(f64, [f64; 3]),
    ) {
        let root = alpha_bar.sqrt();
        let d = [
            alpha_bar * self.bandwidth2[0] + (1.0 - alpha_bar),
            alpha_bar * self.bandwidth2[1] + (1.0 - alpha_bar),
            alpha_bar * self.bandwidth2[2] + (1.0 - alpha_bar),
        ];
        // Pass 1: max log weight for the softmax shift.
        let mut max_neg_half = f64::NEG_INFINITY;
        for b in &self.bank {
            let mut e = 0.0;
            for c in 0..3 {
                let gap = v[c] - root * b[c];
                e += gap * gap / d[c];
            }
            if -0.5 * e > max_neg_half {
                max_neg_half = -0.5 * e;
            }
        }
        // Pass 2: weighted component scores.
        let mut total = 0.0;
        let mut acc: Vec<(f64, [f64; 3])> = Vec::new();
        for b in &self.bank {
            let mut e = 0.0;
            let mut sk = [0.0; 3];
            for c in 0..3 {
                let gap = v[c] - root * b[c];
                e += gap * gap / d[c];
                sk[c] = -gap / d[c];
            }
            let w = (-0.5 * e - max_neg_half).exp();
            total += w;
            acc.push((w, sk));
        }
        for (w, sk) in acc {
            with_component(w / total, sk);
        }
    }

    fn diffused_precision_diag(&self, alpha_bar: f64) -> [f64; 3] {
        [
            1.0 / (alpha_bar * self.bandwidth2[0] + (1.0 - alpha_bar)),
            1.0 / (alpha_bar * self.bandwidth2[1] + (1.0 - alpha_bar)),
            1.0 / (alpha_bar * self.bandwidth2[2] + (1.0 - alpha_bar)),
        ]
    }
}

impl ScoreModel for KdeScore {
    fn score_at(&self, v: [f64; 3], alpha_bar: f64) -> [f64; 3] {
        let mut s = [0.0; 3];
        self.accumulate(v, alpha_bar, |gamma, sk| {
            for c in 0..3 {
                s[c] += gamma * sk[c];
            }
        });
        s
    }

    fn score_with_jacobian_at(&self, v: [f64; 3], alpha_bar: f64) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut s = [0.0; 3];
        let mut second = [[0.0; 3]; 3];
        self.accumulate(v, alpha_bar, |gamma, sk| {
            for r in 0..3 {
                s[r] += gamma * sk[r];
                for c in 0..3 {
                    second[r][c] += gamma * sk[r] * sk[c];
                }
            }
        });
        // Shared diagonal precision: jac = -P + E[s s^T] - s s^T.
        let p = self.diffused_precision_diag(alpha_bar);
        let mut jac = second;
        for r in 0..3 {
            jac[r][r] -= p[r];
            for c in 0..3 {
                jac[r][c] -= s[r] * s[c];
            }
        }
        (s, jac)
    }
}
