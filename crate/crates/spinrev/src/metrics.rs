//! Raster and spin-map comparison metrics for oracle checks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::physics::SpinMap;
use crate::raster::Raster;

fn check_shapes(a: &Raster, b: &Raster) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch {
            left: format!("{}x{}", a.width, a.height),
            right: format!("{}x{}", b.width, b.height),
        });
    }
    Ok(())
}

/// Root-mean-square error between two rasters.
pub fn rmse(a: &Raster, b: &Raster) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB with peak `max |a|`; identical rasters
/// return `f64::INFINITY`.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    let e = rmse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = a.max_abs();
    Ok(20.0 * (peak / e).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

fn channel_stats(values: &mut Vec<f64>) -> ChannelStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if values.len() % 2 == 1 {
        values[values.len() / 2]
    } else {
        0.5 * (values[values.len() / 2 - 1] + values[values.len() / 2])
    };
    ChannelStats {
        mean,
        median,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub label: u8,
    pub count: usize,
    pub pd: ChannelStats,
    pub t1: ChannelStats,
    pub t2: ChannelStats,
}

/// Per-class mean/median/std of the spin properties under a label mask.
/// Labels absent from the mask simply produce no row.
pub fn class_stats(z: &SpinMap, labels: &[u8]) -> Result<Vec<ClassStats>> {
    if labels.len() != z.n_voxels() {
        return Err(Error::DimensionMismatch {
            left: format!("{} voxels", z.n_voxels()),
            right: format!("{} labels", labels.len()),
        });
    }
    let mut buckets: BTreeMap<u8, [Vec<f64>; 3]> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let v = z.voxel(i);
        let bucket = buckets.entry(label).or_default();
        for c in 0..3 {
            bucket[c].push(v[c]);
        }
    }
    Ok(buckets
        .into_iter()
        .map(|(label, mut chans)| ClassStats {
            label,
            count: chans[0].len(),
            pd: channel_stats(&mut chans[0]),
            t1: channel_stats(&mut chans[1]),
            t2: channel_stats(&mut chans[2]),
        })
        .collect())
}
