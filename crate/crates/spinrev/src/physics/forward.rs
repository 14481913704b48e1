//! Raster-level forward model and data fidelity.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::physics::{signal, signal_with_gradient, Image, SequenceParams, SpinMap};
use crate::raster::Raster;
use crate::rng::stream;

/// Apply the signal equation across a spin map and add i.i.d. Gaussian
/// acquisition noise of standard deviation `noise_sigma` (zero allowed).
///
/// Background voxels (pd <= 0) contribute zero signal. Deterministic for a
/// fixed seed; labels are propagated into the image metadata.
pub fn forward_image(
    z: &SpinMap,
    params: &SequenceParams,
    noise_sigma: f64,
    seed: u64,
) -> Result<Image> {
    z.validate()?;
    params.validate()?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::validation(
            "noise sigma",
            format!("{} must be finite and non-negative", noise_sigma),
        ));
    }
    let width = z.width();
    let signals: Vec<f64> = (0..z.n_voxels())
        .into_par_iter()
        .map(|i| {
            let v = z.voxel(i);
            if v[0] <= 0.0 {
                Ok(0.0)
            } else {
                signal(v, params).map_err(|e| Error::at_voxel(i % width, i / width, e))
            }
        })
        .collect::<Result<_>>()?;

    // Noise draws are sequential in voxel order so results do not depend on
    // thread count.
    let mut data: Vec<f32> = Vec::with_capacity(signals.len());
    if noise_sigma > 0.0 {
        let mut rng = stream(seed, "acquisition_noise");
        for s in &signals {
            let eps: f64 = rng.sample(StandardNormal);
            data.push((s + noise_sigma * eps) as f32);
        }
    } else {
        data.extend(signals.iter().map(|&s| s as f32));
    }

    Ok(Image {
        data: Raster::from_vec(z.width(), z.height(), data)?,
        params: params.clone(),
        noise_sigma,
        seed: Some(seed),
        labels: z.labels.clone(),
    })
}

/// Per-voxel signal gradients across a spin map; background voxels get a
/// zero gradient.
pub fn gradient_map(z: &SpinMap, params: &SequenceParams) -> Result<Vec<[f64; 3]>> {
    z.validate()?;
    params.validate()?;
    let width = z.width();
    (0..z.n_voxels())
        .into_par_iter()
        .map(|i| {
            let v = z.voxel(i);
            if v[0] <= 0.0 {
                Ok([0.0; 3])
            } else {
                signal_with_gradient(v, params)
                    .map(|(_, g)| g)
                    .map_err(|e| Error::at_voxel(i % width, i / width, e))
            }
        })
        .collect()
}

/// Squared-L2 residual between the forward model of `z` and the observation,
/// together with its gradient with respect to the spin properties.
pub fn data_fidelity(z: &SpinMap, x: &Image) -> Result<(f64, Vec<[f64; 3]>)> {
    z.validate()?;
    x.validate()?;
    if z.width() != x.width() || z.height() != x.height() {
        return Err(Error::DimensionMismatch {
            left: format!("spin map {}x{}", z.width(), z.height()),
            right: format!("image {}x{}", x.width(), x.height()),
        });
    }
    let width = z.width();
    let per_voxel: Vec<(f64, [f64; 3])> = (0..z.n_voxels())
        .into_par_iter()
        .map(|i| {
            let v = z.voxel(i);
            if v[0] <= 0.0 {
                Ok((0.0, [0.0; 3]))
            } else {
                signal_with_gradient(v, &x.params)
                    .map_err(|e| Error::at_voxel(i % width, i / width, e))
            }
        })
        .collect::<Result<_>>()?;

    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; z.n_voxels()];
    for (i, (s, g)) in per_voxel.iter().enumerate() {
        let v = z.voxel(i);
        let r = if v[0] <= 0.0 {
            0.0 - f64::from(x.data.data[i])
        } else {
            s - f64::from(x.data.data[i])
        };
        loss += r * r;
        if v[0] > 0.0 {
            for c in 0..3 {
                grad[i][c] = 2.0 * r * g[c];
            }
        }
    }
    Ok((loss, grad))
}
