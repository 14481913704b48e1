//! Affine maps between physical spin properties and the normalized
//! diffusion space `[-1, 1]^3`.

use log::warn;

use crate::diffusion::Latent;
use crate::physics::SpinMap;
use crate::raster::Raster;

/// Relaxation times below this floor (milliseconds) are clamped when
/// denormalizing, so any produced spin map satisfies `t1, t2 > 0`.
pub const MIN_RELAXATION_MS: f64 = 1.0;

/// Per-channel affine normalization with fixed physical ranges:
/// PD in [0, 1.2] a.u., T1 in [0, 3000] ms, T2 in [0, 500] ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub ranges: [(f64, f64); 3],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            ranges: [(0.0, 1.2), (0.0, 3000.0), (0.0, 500.0)],
        }
    }
}

impl Normalizer {
    /// Physical-per-normalized slope of channel `c`.
    #[inline]
    pub fn slope(&self, c: usize) -> f64 {
        let (lo, hi) = self.ranges[c];
        (hi - lo) / 2.0
    }

    /// Map a physical value into [-1, 1] (unclamped).
    #[inline]
    pub fn normalize_value(&self, c: usize, v: f64) -> f64 {
        let (lo, hi) = self.ranges[c];
        2.0 * (v - lo) / (hi - lo) - 1.0
    }

    /// Map a normalized value back to physical units (unclamped).
    #[inline]
    pub fn denormalize_value(&self, c: usize, u: f64) -> f64 {
        let (lo, hi) = self.ranges[c];
        lo + (u + 1.0) / 2.0 * (hi - lo)
    }

    /// Normalize one sample, clamping into [-1, 1].
    pub fn normalize_sample(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.normalize_value(c, v[c]).clamp(-1.0, 1.0);
        }
        out
    }

    /// Denormalize one sample into physical units, clamping into range and
    /// flooring relaxation times at [`MIN_RELAXATION_MS`].
    pub fn denormalize_sample(&self, u: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let (lo, hi) = self.ranges[c];
            out[c] = self.denormalize_value(c, u[c]).clamp(lo, hi);
        }
        out[1] = out[1].max(MIN_RELAXATION_MS);
        out[2] = out[2].max(MIN_RELAXATION_MS);
        out
    }

    /// Normalize a spin map into a latent raster. Out-of-range values are
    /// clamped and counted.
    pub fn normalize_map(&self, map: &SpinMap) -> Latent {
        let mut clamped = 0usize;
        let data = (0..map.n_voxels())
            .map(|i| {
                let v = map.voxel(i);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let u = self.normalize_value(c, v[c]);
                    if !(-1.0..=1.0).contains(&u) {
                        clamped += 1;
                    }
                    out[c] = u.clamp(-1.0, 1.0);
                }
                out
            })
            .collect();
        if clamped > 0 {
            warn!(
                "normalization clamped {} channel values outside the configured ranges",
                clamped
            );
        }
        Latent {
            width: map.width(),
            height: map.height(),
            data,
        }
    }

    /// Denormalize a latent raster into a spin map (no labels).
    pub fn denormalize_to_spinmap(&self, z: &Latent) -> SpinMap {
        let n = z.n_voxels();
        let mut pd = Vec::with_capacity(n);
        let mut t1 = Vec::with_capacity(n);
        let mut t2 = Vec::with_capacity(n);
        for u in &z.data {
            let v = self.denormalize_sample(*u);
            pd.push(v[0] as f32);
            t1.push(v[1] as f32);
            t2.push(v[2] as f32);
        }
        SpinMap {
            pd: Raster {
                width: z.width,
                height: z.height,
                data: pd,
            },
            t1: Raster {
                width: z.width,
                height: z.height,
                data: t1,
            },
            t2: Raster {
                width: z.width,
                height: z.height,
                data: t2,
            },
            labels: None,
        }
    }
}
