//! Per-voxel (A, T1, T2) extraction from an mSASHA acquisition stack.
//!
//! Each voxel's signal across the stack follows the mSASHA equation with
//! shared unknowns `(A, T1, T2)`; they are recovered by damped least squares
//! (Levenberg–Marquardt) with the analytic Jacobian from the physics module,
//! box bounds, and a small multi-start grid over (T1, T2). The amplitude `A`
//! stands in for proton density downstream.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::physics::{signal_with_gradient, Image, SequenceParams, SpinMap};
use crate::raster::Raster;

/// Stand-in for an effectively infinite saturation-recovery time (ms); kept
/// finite so acquisition metadata survives JSON sidecars.
pub const TS_FULL_RECOVERY: f64 = 10_000.0;

/// Default acquisition protocol for synthetic stacks: eight (TS, TD, TE)
/// tuples spanning TS in {300, 600, full}, TD in {0, 30, 50} and
/// TE in {0, 25, 50} ms, chosen for identifiability of all three unknowns.
pub fn default_protocol() -> Vec<SequenceParams> {
    [
        (300.0, 0.0, 0.0),
        (600.0, 0.0, 0.0),
        (TS_FULL_RECOVERY, 0.0, 0.0),
        (300.0, 30.0, 0.0),
        (600.0, 30.0, 0.0),
        (TS_FULL_RECOVERY, 50.0, 0.0),
        (TS_FULL_RECOVERY, 0.0, 25.0),
        (TS_FULL_RECOVERY, 0.0, 50.0),
    ]
    .into_iter()
    .map(|(ts, td, te)| SequenceParams::Msasha {
        ts,
        td,
        te,
        saturation_exponent_mode: Default::default(),
    })
    .collect()
}

/// A stack of mSASHA baseline images sharing dimensions but varying in
/// (TS, TD, TE).
#[derive(Debug, Clone)]
pub struct MsashaStack {
    pub images: Vec<Image>,
}

impl MsashaStack {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        let stack = MsashaStack { images };
        stack.validate()?;
        Ok(stack)
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() < 4 {
            return Err(Error::validation(
                "msasha stack",
                format!("{} images; need at least 4 for 3 unknowns", self.images.len()),
            ));
        }
        let (w, h) = (self.images[0].width(), self.images[0].height());
        let mut tds = Vec::new();
        let mut tes = Vec::new();
        for img in &self.images {
            if img.width() != w || img.height() != h {
                return Err(Error::DimensionMismatch {
                    left: format!("{}x{}", w, h),
                    right: format!("{}x{}", img.width(), img.height()),
                });
            }
            match img.params {
                SequenceParams::Msasha { td, te, .. } => {
                    if !tds.contains(&td.to_bits()) {
                        tds.push(td.to_bits());
                    }
                    if !tes.contains(&te.to_bits()) {
                        tes.push(te.to_bits());
                    }
                }
                _ => {
                    return Err(Error::validation(
                        "msasha stack",
                        format!("image has {} params, expected msasha", img.params.sequence_name()),
                    ))
                }
            }
        }
        if tds.len() < 2 || tes.len() < 2 {
            return Err(Error::validation(
                "msasha stack",
                format!(
                    "degenerate protocol: {} distinct TD and {} distinct TE values; need variation in both",
                    tds.len(),
                    tes.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub t1_bounds: (f64, f64),
    pub t2_bounds: (f64, f64),
    /// Upper bound on A as a multiple of the voxel's largest signal.
    pub a_bound_factor: f64,
    pub max_iterations: usize,
    /// Relative parameter-step convergence threshold.
    pub step_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            t1_bounds: (50.0, 3000.0),
            t2_bounds: (5.0, 500.0),
            a_bound_factor: 10.0,
            max_iterations: 200,
            step_tolerance: 1e-8,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.t1_bounds.0 > 0.0
            && self.t1_bounds.0 < self.t1_bounds.1
            && self.t2_bounds.0 > 0.0
            && self.t2_bounds.0 < self.t2_bounds.1
            && self.a_bound_factor > 0.0
            && self.max_iterations > 0
            && self.step_tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation("fit config", format!("{:?}", self)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Fitted map with `pd` holding the amplitude A.
    pub spinmap: SpinMap,
    /// Final sum of squared residuals per voxel.
    pub residual: Raster,
    pub iterations: Vec<u32>,
    pub converged: Vec<bool>,
}

/// (T1, T2) starting points on a 2x2 log grid inside the bounds, paired with
/// an amplitude start at the voxel's largest observed signal.
pub(crate) fn multi_starts(max_signal: f64, config: &FitConfig) -> Vec<[f64; 3]> {
    let log_points = |lo: f64, hi: f64| -> [f64; 2] {
        let (l, h) = (lo.ln(), hi.ln());
        [
            (l + (h - l) / 3.0).exp(),
            (l + 2.0 * (h - l) / 3.0).exp(),
        ]
    };
    let t1s = log_points(config.t1_bounds.0, config.t1_bounds.1);
    let t2s = log_points(config.t2_bounds.0, config.t2_bounds.1);
    let mut starts = Vec::with_capacity(4);
    for t1 in t1s {
        for t2 in t2s {
            starts.push([max_signal, t1, t2]);
        }
    }
    starts
}

struct VoxelFit {
    params: [f64; 3],
    cost: f64,
    iterations: u32,
    converged: bool,
}

fn eval_cost(theta: [f64; 3], ys: &[f64], protocol: &[SequenceParams]) -> f64 {
    let mut cost = 0.0;
    for (y, p) in ys.iter().zip(protocol) {
        let (f, _) = signal_with_gradient(theta, p).expect("bounded parameters are regular");
        let r = f - y;
        cost += r * r;
    }
    cost
}

fn eval_system(
    theta: [f64; 3],
    ys: &[f64],
    protocol: &[SequenceParams],
) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let mut cost = 0.0;
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (y, p) in ys.iter().zip(protocol) {
        let (f, g) = signal_with_gradient(theta, p).expect("bounded parameters are regular");
        let r = f - y;
        cost += r * r;
        let j = Vector3::from(g);
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (cost, jtj, jtr)
}

fn clamp_params(theta: [f64; 3], a_hi: f64, config: &FitConfig) -> [f64; 3] {
    [
        theta[0].clamp(0.0, a_hi),
        theta[1].clamp(config.t1_bounds.0, config.t1_bounds.1),
        theta[2].clamp(config.t2_bounds.0, config.t2_bounds.1),
    ]
}

fn levenberg_marquardt(
    start: [f64; 3],
    ys: &[f64],
    protocol: &[SequenceParams],
    a_hi: f64,
    max_signal: f64,
    config: &FitConfig,
) -> VoxelFit {
    let mut theta = clamp_params(start, a_hi, config);
    let (mut cost, mut jtj, mut jtr) = eval_system(theta, ys, protocol);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = cost == 0.0;

    while iterations < config.max_iterations as u32 && !converged {
        iterations += 1;
        // Marquardt scaling keeps the damping parameter meaningful across
        // the very different magnitudes of A, T1 and T2.
        let mut damped = jtj;
        let diag_floor = 1e-12 * (jtj.diagonal().max()).max(1e-300);
        for i in 0..3 {
            damped[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
        }
        let step = match damped.cholesky() {
            Some(chol) => chol.solve(&(-jtr)),
            None => {
                lambda *= 10.0;
                if lambda > 1e10 {
                    break;
                }
                continue;
            }
        };
        let proposal = clamp_params(
            [theta[0] + step[0], theta[1] + step[1], theta[2] + step[2]],
            a_hi,
            config,
        );
        let new_cost = eval_cost(proposal, ys, protocol);
        if new_cost < cost {
            let rel_step = (0..3)
                .map(|i| {
                    let scale = theta[i].abs().max(if i == 0 { 1e-3 * max_signal.max(1e-300) } else { 1.0 });
                    (proposal[i] - theta[i]).abs() / scale
                })
                .fold(0.0_f64, f64::max);
            let improvement = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            theta = proposal;
            let refreshed = eval_system(theta, ys, protocol);
            cost = refreshed.0;
            jtj = refreshed.1;
            jtr = refreshed.2;
            lambda = (lambda / 3.0).max(1e-12);
            if rel_step < config.step_tolerance || improvement < 1e-12 || cost == 0.0 {
                converged = true;
            }
        } else {
            lambda *= 4.0;
            if lambda > 1e10 {
                break;
            }
        }
    }

    VoxelFit {
        params: theta,
        cost,
        iterations,
        converged,
    }
}

fn fit_voxel(ys: &[f64], protocol: &[SequenceParams], config: &FitConfig) -> VoxelFit {
    let max_signal = ys.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
    if max_signal == 0.0 {
        // All-zero signal: background by convention.
        return VoxelFit {
            params: [0.0, config.t1_bounds.0, config.t2_bounds.0],
            cost: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let a_hi = config.a_bound_factor * max_signal;
    let mut best: Option<VoxelFit> = None;
    for start in multi_starts(max_signal, config) {
        let fit = levenberg_marquardt(start, ys, protocol, a_hi, max_signal, config);
        let better = match &best {
            Some(b) => fit.cost < b.cost,
            None => true,
        };
        if better {
            best = Some(fit);
        }
    }
    best.unwrap()
}

/// Fit `(A, T1, T2)` per voxel across the stack. Voxel fits are independent
/// and run in parallel; the result is deterministic.
pub fn fit_msasha(stack: &MsashaStack, config: &FitConfig) -> Result<FitResult> {
    stack.validate()?;
    config.validate()?;
    let protocol: Vec<SequenceParams> = stack.images.iter().map(|i| i.params.clone()).collect();
    let n = stack.width() * stack.height();

    let fits: Vec<VoxelFit> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ys: Vec<f64> = stack
                .images
                .iter()
                .map(|img| f64::from(img.data.data[i]))
                .collect();
            fit_voxel(&ys, &protocol, config)
        })
        .collect();

    let (w, h) = (stack.width(), stack.height());
    let mut pd = Vec::with_capacity(n);
    let mut t1 = Vec::with_capacity(n);
    let mut t2 = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    let mut iterations = Vec::with_capacity(n);
    let mut converged = Vec::with_capacity(n);
    for fit in fits {
        pd.push(fit.params[0] as f32);
        t1.push(fit.params[1] as f32);
        t2.push(fit.params[2] as f32);
        residual.push(fit.cost as f32);
        iterations.push(fit.iterations);
        converged.push(fit.converged);
    }
    Ok(FitResult {
        spinmap: SpinMap {
            pd: Raster::from_vec(w, h, pd)?,
            t1: Raster::from_vec(w, h, t1)?,
            t2: Raster::from_vec(w, h, t2)?,
            labels: stack.images[0].labels.clone(),
        },
        residual: Raster::from_vec(w, h, residual)?,
        iterations,
        converged,
    })
}

/// Simulate an mSASHA stack from ground-truth properties under `protocol`.
pub fn simulate_stack(
    truth: &SpinMap,
    protocol: &[SequenceParams],
    noise_sigma: f64,
    seed: u64,
) -> Result<MsashaStack> {
    let images = protocol
        .iter()
        .enumerate()
        .map(|(k, p)| crate::physics::forward_image(truth, p, noise_sigma, seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    MsashaStack::new(images)
}
