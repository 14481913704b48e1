//! Synthetic cardiac short-axis phantoms.
//!
//! Parametric geometry (LV blood pool, myocardial annulus, RV crescent, fat
//! rim) painted onto a raster, with per-class spin properties and optional
//! multiplicative log-normal jitter. Not anatomically realistic — the point
//! is a ground truth every downstream stage can be checked against.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::SpinMap;
use crate::raster::Raster;
use crate::rng::stream;

/// Tissue classes of the phantom. The numeric value doubles as the label id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueKind {
    Background,
    Blood,
    Myocardium,
    Fat,
}

/// Spin properties of one tissue class. Times in milliseconds, proton
/// density in arbitrary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueClass {
    pub name: TissueKind,
    pub pd: f64,
    pub t1: f64,
    pub t2: f64,
}

impl TissueClass {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t2 > 0.0 && self.pd >= 0.0) {
            return Err(Error::validation(
                "tissue class",
                format!("{:?}: pd {}, t1 {}, t2 {}", self.name, self.pd, self.t1, self.t2),
            ));
        }
        if self.name != TissueKind::Background && self.t2 > self.t1 {
            return Err(Error::validation(
                "tissue class",
                format!("{:?}: t2 {} exceeds t1 {}", self.name, self.t2, self.t1),
            ));
        }
        Ok(())
    }
}

/// Default 1.5T-representative class table. Only the relative orderings are
/// meaningful for validation (blood has high T1 and T2, myocardium high T1
/// but low T2, fat low T1 but higher T2); the absolute numbers are
/// conventional and pinned here so tests can rely on them.
pub fn default_classes() -> Vec<TissueClass> {
    vec![
        TissueClass {
            name: TissueKind::Background,
            pd: 0.0,
            t1: 1.0,
            t2: 1.0,
        },
        TissueClass {
            name: TissueKind::Blood,
            pd: 0.9,
            t1: 1550.0,
            t2: 240.0,
        },
        TissueClass {
            name: TissueKind::Myocardium,
            pd: 0.7,
            t1: 950.0,
            t2: 50.0,
        },
        TissueClass {
            name: TissueKind::Fat,
            pd: 1.0,
            t1: 260.0,
            t2: 80.0,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    /// Seed for geometry jitter and property noise.
    pub seed: u64,
    pub classes: Vec<TissueClass>,
    /// Relative standard deviation of per-voxel property jitter.
    pub noise_level: f64,
    /// Gaussian blur radius (voxels) applied to the jitter field.
    pub smoothness: f64,
}

impl PhantomSpec {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        PhantomSpec {
            width,
            height,
            seed,
            classes: default_classes(),
            noise_level: 0.0,
            smoothness: 0.0,
        }
    }

    pub fn with_noise(mut self, noise_level: f64, smoothness: f64) -> Self {
        self.noise_level = noise_level;
        self.smoothness = smoothness;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::validation(
                "phantom spec",
                format!("dimensions {}x{} below the 16-voxel minimum", self.width, self.height),
            ));
        }
        if !(0.0..=0.5).contains(&self.noise_level) {
            return Err(Error::validation(
                "phantom spec",
                format!("noise level {} outside [0, 0.5]", self.noise_level),
            ));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::validation(
                "phantom spec",
                format!("smoothness {} must be finite and non-negative", self.smoothness),
            ));
        }
        for kind in [
            TissueKind::Background,
            TissueKind::Blood,
            TissueKind::Myocardium,
            TissueKind::Fat,
        ] {
            if !self.classes.iter().any(|c| c.name == kind) {
                return Err(Error::validation(
                    "phantom spec",
                    format!("class table is missing {:?}", kind),
                ));
            }
        }
        for class in &self.classes {
            class.validate()?;
        }
        Ok(())
    }

    fn label_of(&self, kind: TissueKind) -> u8 {
        self.classes.iter().position(|c| c.name == kind).unwrap() as u8
    }
}

/// Separable Gaussian blur with reflective borders; used to correlate the
/// jitter field spatially. The result is rescaled to preserve unit variance.
fn blur_field(field: &mut [f64], width: usize, height: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let var_factor: f64 = kernel.iter().map(|k| k * k).sum();

    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };

    let mut tmp = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - half, width as isize);
                acc += k * field[y * width + sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - half, height as isize);
                acc += k * tmp[sy * width + x];
            }
            // Undo the variance shrink of the two separable passes.
            field[y * width + x] = acc / var_factor;
        }
    }
}

/// Generate a spin map partitioned into LV blood / myocardium annulus /
/// RV crescent / fat rim / background, deterministic for a fixed seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<SpinMap> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let mut geom = stream(spec.seed, "phantom_geometry");

    // Geometry jitter keeps the regions inside the body for any draw.
    let mut jit = || geom.gen_range(-1.0_f64..1.0);
    let lv_center = (0.18 + 0.03 * jit(), 0.02 + 0.03 * jit());
    let r_lv = 0.26 * (1.0 + 0.05 * jit());
    let r_myo = r_lv + 0.16 * (1.0 + 0.05 * jit());
    let rv_center = (-0.28 + 0.03 * jit(), 0.02 + 0.03 * jit());
    let r_rv = 0.38 * (1.0 + 0.05 * jit());

    let label_bg = spec.label_of(TissueKind::Background);
    let label_blood = spec.label_of(TissueKind::Blood);
    let label_myo = spec.label_of(TissueKind::Myocardium);
    let label_fat = spec.label_of(TissueKind::Fat);

    let unit = f64::from(w.min(h) as u32) / 2.0;
    let mut labels = vec![label_bg; n];
    for y in 0..h {
        for x in 0..w {
            let ux = (x as f64 + 0.5 - w as f64 / 2.0) / unit;
            let uy = (y as f64 + 0.5 - h as f64 / 2.0) / unit;
            let body = (ux / 0.95).powi(2) + (uy / 0.90).powi(2);
            let i = y * w + x;
            if body > 1.0 {
                continue;
            }
            if body > 0.92_f64.powi(2) {
                labels[i] = label_fat;
                continue;
            }
            let d_lv = ((ux - lv_center.0).powi(2) + (uy - lv_center.1).powi(2)).sqrt();
            let d_rv = ((ux - rv_center.0).powi(2) + (uy - rv_center.1).powi(2)).sqrt();
            if d_lv <= r_lv {
                labels[i] = label_blood;
            } else if d_lv <= r_myo {
                labels[i] = label_myo;
            } else if d_rv <= r_rv && d_lv > r_myo * 1.05 {
                labels[i] = label_blood;
            }
        }
    }

    // One log-normal jitter field per property, blurred for spatial
    // coherence; zero noise level leaves the map piecewise constant.
    let mut noise_rng = stream(spec.seed, "phantom_jitter");
    let mut fields = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    if spec.noise_level > 0.0 {
        for field in fields.iter_mut() {
            for v in field.iter_mut() {
                *v = noise_rng.sample(StandardNormal);
            }
            blur_field(field, w, h, spec.smoothness);
        }
    }

    let mut pd = vec![0.0_f32; n];
    let mut t1 = vec![0.0_f32; n];
    let mut t2 = vec![0.0_f32; n];
    for i in 0..n {
        let class = &spec.classes[labels[i] as usize];
        if class.name == TissueKind::Background {
            pd[i] = 0.0;
            // Conventional 1 ms placeholders keep division hazards out of
            // downstream kernels.
            t1[i] = 1.0;
            t2[i] = 1.0;
            continue;
        }
        let jitter = |field: &[f64]| (spec.noise_level * field[i]).exp();
        pd[i] = (class.pd * jitter(&fields[0])) as f32;
        t1[i] = (class.t1 * jitter(&fields[1])) as f32;
        t2[i] = (class.t2 * jitter(&fields[2])) as f32;
    }

    let map = SpinMap {
        pd: Raster::from_vec(w, h, pd)?,
        t1: Raster::from_vec(w, h, t1)?,
        t2: Raster::from_vec(w, h, t2)?,
        labels: Some(labels),
    };
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = PhantomSpec::new(32, 32, 7).with_noise(0.1, 1.0);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_gives_exact_class_values() {
        let spec = PhantomSpec::new(48, 48, 3);
        let map = generate_phantom(&spec).unwrap();
        let labels = map.labels.as_ref().unwrap();
        let mut seen_blood = false;
        for (i, &label) in labels.iter().enumerate() {
            let class = &spec.classes[label as usize];
            if class.name == TissueKind::Blood {
                seen_blood = true;
                assert_eq!(f64::from(map.pd.data[i]), class.pd);
                assert_eq!(f64::from(map.t1.data[i]), class.t1);
                assert_eq!(f64::from(map.t2.data[i]), class.t2);
            }
        }
        assert!(seen_blood);
    }

    #[test]
    fn zero_noise_is_piecewise_constant_on_labels() {
        let spec = PhantomSpec::new(32, 32, 11);
        let map = generate_phantom(&spec).unwrap();
        let labels = map.labels.as_ref().unwrap();
        let mut per_label: std::collections::HashMap<u8, (f32, f32, f32)> = Default::default();
        for (i, &label) in labels.iter().enumerate() {
            let entry = per_label
                .entry(label)
                .or_insert((map.pd.data[i], map.t1.data[i], map.t2.data[i]));
            assert_eq!(entry.0, map.pd.data[i]);
            assert_eq!(entry.1, map.t1.data[i]);
            assert_eq!(entry.2, map.t2.data[i]);
        }
        assert!(per_label.len() >= 4, "expected all regions present");
    }

    #[test]
    fn default_table_matches_reported_orderings() {
        let classes = default_classes();
        let by_kind = |kind: TissueKind| classes.iter().find(|c| c.name == kind).unwrap();
        let blood = by_kind(TissueKind::Blood);
        let myo = by_kind(TissueKind::Myocardium);
        let fat = by_kind(TissueKind::Fat);
        assert!(blood.t1 > myo.t1 && myo.t1 > fat.t1);
        assert!(blood.t2 > fat.t2 && fat.t2 > myo.t2);
    }

    #[test]
    fn all_rasters_share_dimensions() {
        let map = generate_phantom(&PhantomSpec::new(24, 40, 1)).unwrap();
        assert!(map.validate().is_ok());
        assert_eq!(map.labels.as_ref().unwrap().len(), 24 * 40);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_phantom(&PhantomSpec::new(8, 32, 0)).is_err());
        assert!(generate_phantom(&PhantomSpec::new(32, 32, 0).with_noise(0.7, 0.0)).is_err());
        let mut spec = PhantomSpec::new(32, 32, 0);
        spec.classes.retain(|c| c.name != TissueKind::Fat);
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn jitter_keeps_properties_positive() {
        let spec = PhantomSpec::new(32, 32, 5).with_noise(0.5, 0.0);
        let map = generate_phantom(&spec).unwrap();
        for i in 0..map.n_voxels() {
            assert!(map.t1.data[i] > 0.0);
            assert!(map.t2.data[i] > 0.0);
        }
    }
}
