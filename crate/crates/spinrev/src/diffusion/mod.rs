//! DDPM machinery over normalized spin-property space.
//!
//! The diffusion state is a 3-channel raster in `[-1, 1]^3` (normalized
//! PD/T1/T2). The learned denoiser of the original formulation is replaced
//! by pluggable analytic score models with the same interface: an exact
//! Gaussian, a Gaussian mixture, and a sample-bank kernel density estimate.

mod normalize;
mod sampler;
mod schedule;
mod score;

pub use normalize::{Normalizer, MIN_RELAXATION_MS};
pub use sampler::{forward_noise, reverse_step, sample, strided_timesteps};
pub(crate) use sampler::{run_chain, ChainStep, GuidanceFn};
pub use schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
pub use score::{GaussianScore, GmmComponent, GmmScore, KdeScore, ScoreModel};

use rand::Rng;
use rand_distr::StandardNormal;

/// Normalized 3-channel diffusion state; one `[pd, t1, t2]` triple per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Latent {
    pub fn zeros(width: usize, height: usize) -> Self {
        Latent {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn standard_normal(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let data = (0..width * height)
            .map(|_| {
                [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ]
            })
            .collect();
        Latent {
            width,
            height,
            data,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.data.len()
    }

    /// Per-channel mean over all voxels.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for v in &self.data {
            for c in 0..3 {
                acc[c] += v[c];
            }
        }
        let n = self.data.len().max(1) as f64;
        acc.map(|a| a / n)
    }

    /// Per-channel variance over all voxels.
    pub fn channel_vars(&self) -> [f64; 3] {
        let means = self.channel_means();
        let mut acc = [0.0; 3];
        for v in &self.data {
            for c in 0..3 {
                let d = v[c] - means[c];
                acc[c] += d * d;
            }
        }
        let n = (self.data.len().max(2) - 1) as f64;
        acc.map(|a| a / n)
    }
}
