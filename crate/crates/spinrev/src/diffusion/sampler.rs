//! Forward noising and the (optionally guided) reverse chain.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::{Latent, NoiseSchedule, ScoreModel};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Evenly strided reverse-chain timesteps from `t_total` down, ending at the
/// step that transitions to 0. `steps = t_total` reproduces the full chain.
pub fn strided_timesteps(t_total: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| t_total - i * t_total / steps)
        .collect();
    ts.dedup();
    ts
}

/// Diffuse a clean latent to step `t`:
/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    z0: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Latent> {
    schedule.check_step(t)?;
    let abar = schedule.alpha_bar(t);
    let (root, noise) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut rng = stream(seed, "forward_noise");
    let data = z0
        .data
        .iter()
        .map(|v| {
            let mut out = [0.0; 3];
            for c in 0..3 {
                let eps: f64 = rng.sample(StandardNormal);
                out[c] = root * v[c] + noise * eps;
            }
            out
        })
        .collect();
    Ok(Latent {
        width: z0.width,
        height: z0.height,
        data,
    })
}

/// One unconditional reverse step `t -> t-1`:
/// `z_{t-1} = (z_t + (1 - alpha_t) score(z_t, t)) / sqrt(alpha_t) + sigma_t eps`,
/// with no noise at t = 1.
pub fn reverse_step(
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    score: &dyn ScoreModel,
    seed: u64,
) -> Result<Latent> {
    schedule.check_step(t)?;
    let mut rng = stream(seed, "reverse_step");
    let mut out = z.clone();
    transition(&mut out, schedule, t, t - 1, score, &mut rng);
    Ok(out)
}

/// In-place transition `t -> t_prev` with stride-adjusted coefficients.
fn transition(
    z: &mut Latent,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    score: &dyn ScoreModel,
    rng: &mut impl Rng,
) {
    let abar_t = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t_prev);
    let alpha_eff = schedule.effective_alpha(t, t_prev);
    let beta_eff = 1.0 - alpha_eff;
    let sigma = ((1.0 - abar_prev) / (1.0 - abar_t) * beta_eff).max(0.0).sqrt();

    let scores: Vec<[f64; 3]> = z
        .data
        .par_iter()
        .map(|v| score.score_at(*v, abar_t))
        .collect();
    let inv_root = 1.0 / alpha_eff.sqrt();
    for (v, s) in z.data.iter_mut().zip(&scores) {
        for c in 0..3 {
            v[c] = (v[c] + beta_eff * s[c]) * inv_root;
        }
    }
    // Noise draws stay sequential in voxel order for determinism; the final
    // transition (to t_prev = 0) adds none.
    if t_prev > 0 {
        for v in z.data.iter_mut() {
            for c in 0..3 {
                let eps: f64 = rng.sample(StandardNormal);
                v[c] += sigma * eps;
            }
        }
    }
}

pub(crate) struct ChainStep {
    /// Index into the strided timestep list.
    pub index: usize,
    /// Schedule timestep being left.
    pub t: usize,
    pub alpha_bar: f64,
}

/// Per-step guidance hook: receives the state *before* the transition and
/// returns the term to subtract *after* it (the conditioning gradient term),
/// or `None` to leave the step unconditional.
pub(crate) type GuidanceFn<'a> =
    dyn FnMut(&ChainStep, &Latent) -> Result<Option<Vec<[f64; 3]>>> + 'a;

/// Run the reverse chain from `z_T ~ N(0, I)` over `steps` strided
/// timesteps. With `guidance = None` this is unconditional sampling; the
/// guided path consumes the identical random stream, so a guidance hook that
/// returns `None` reproduces the unconditional chain bit for bit.
pub(crate) fn run_chain(
    schedule: &NoiseSchedule,
    score: &dyn ScoreModel,
    steps: usize,
    width: usize,
    height: usize,
    seed: u64,
    mut guidance: Option<&mut GuidanceFn>,
) -> Result<Latent> {
    if steps == 0 || steps > schedule.t() {
        return Err(Error::validation(
            "reverse chain",
            format!("steps = {} outside 1..={}", steps, schedule.t()),
        ));
    }
    let timesteps = strided_timesteps(schedule.t(), steps);
    let mut rng = stream(seed, "diffusion_chain");
    let mut z = Latent::standard_normal(width, height, &mut rng);

    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = if k + 1 < timesteps.len() {
            timesteps[k + 1]
        } else {
            0
        };
        let info = ChainStep {
            index: k,
            t,
            alpha_bar: schedule.alpha_bar(t),
        };
        let pull = match guidance.as_mut() {
            Some(hook) => hook(&info, &z)?,
            None => None,
        };
        transition(&mut z, schedule, t, t_prev, score, &mut rng);
        if let Some(pull) = pull {
            for (v, g) in z.data.iter_mut().zip(&pull) {
                for c in 0..3 {
                    v[c] -= g[c];
                }
            }
        }
    }
    Ok(z)
}

/// Unconditional sampling: run the reverse chain and return the `z_0`
/// estimate.
pub fn sample(
    schedule: &NoiseSchedule,
    score: &dyn ScoreModel,
    steps: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Latent> {
    run_chain(schedule, score, steps, width, height, seed, None)
}
