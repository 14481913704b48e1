//! MR signal equations, their gradients, and the data-fidelity term.
//!
//! A voxel's spin properties `(PD, T1, T2)` determine its signal under any
//! acquisition through a sequence-specific forward model. This module holds
//! the per-voxel signal equations (bSSFP, MOLLI, GRE, mSASHA, plus a linear
//! test operator), analytic gradients with respect to the spin properties,
//! and the squared-residual fidelity used to guide inversion.

mod forward;
mod signal;

pub use forward::{data_fidelity, forward_image, gradient_map};
pub use signal::{
    bssfp_signal, gre_signal, molli_parts, molli_signal, msasha_signal, signal, signal_gradient,
    signal_with_gradient, MolliParts,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Per-voxel spin properties: proton density plus longitudinal and
/// transverse relaxation times (milliseconds), with an optional tissue-label
/// mask carried alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinMap {
    pub pd: Raster,
    pub t1: Raster,
    pub t2: Raster,
    pub labels: Option<Vec<u8>>,
}

impl SpinMap {
    pub fn width(&self) -> usize {
        self.pd.width
    }

    pub fn height(&self) -> usize {
        self.pd.height
    }

    pub fn n_voxels(&self) -> usize {
        self.pd.len()
    }

    /// Spin properties of voxel `i` lifted to f64.
    #[inline]
    pub fn voxel(&self, i: usize) -> [f64; 3] {
        [
            f64::from(self.pd.data[i]),
            f64::from(self.t1.data[i]),
            f64::from(self.t2.data[i]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pd.same_shape(&self.t1) || !self.pd.same_shape(&self.t2) {
            return Err(Error::DimensionMismatch {
                left: format!("pd {}x{}", self.pd.width, self.pd.height),
                right: format!(
                    "t1 {}x{} / t2 {}x{}",
                    self.t1.width, self.t1.height, self.t2.width, self.t2.height
                ),
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.n_voxels() {
                return Err(Error::DimensionMismatch {
                    left: format!("{} voxels", self.n_voxels()),
                    right: format!("{} labels", labels.len()),
                });
            }
        }
        if !self.pd.all_finite() || !self.t1.all_finite() || !self.t2.all_finite() {
            return Err(Error::NonFinite("spin map".into()));
        }
        for i in 0..self.n_voxels() {
            let [pd, t1, t2] = self.voxel(i);
            if pd > 0.0 && (t1 <= 0.0 || t2 <= 0.0) {
                return Err(Error::validation(
                    "spin map",
                    format!(
                        "voxel {} has pd {} but non-positive relaxation times (t1 {}, t2 {})",
                        i, pd, t1, t2
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// How the mSASHA saturation-recovery exponent is interpreted.
///
/// The printed equation decays the SR term with `exp(-TS/TE)`; standard
/// saturation-recovery physics uses `exp(-TS/T1)`. Both forms are available;
/// `Physical` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationExponentMode {
    PaperVerbatim,
    #[default]
    Physical,
}

/// Acquisition parameters, tagged by sequence. Flip angles are radians;
/// all times are milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sequence", rename_all = "snake_case")]
pub enum SequenceParams {
    Bssfp {
        flip_angle: f64,
    },
    Molli {
        flip_angle: f64,
        t_inv: f64,
    },
    Gre {
        flip_angle: f64,
        tr: f64,
        te: f64,
    },
    Msasha {
        ts: f64,
        td: f64,
        te: f64,
        #[serde(default)]
        saturation_exponent_mode: SaturationExponentMode,
    },
    /// Affine per-voxel operator used as an analytically tractable stand-in
    /// in posterior oracles: `signal = weights . (pd, t1, t2) + offset`.
    LinearTest {
        weights: [f64; 3],
        offset: f64,
    },
}

impl SequenceParams {
    pub fn sequence_name(&self) -> &'static str {
        match self {
            SequenceParams::Bssfp { .. } => "bssfp",
            SequenceParams::Molli { .. } => "molli",
            SequenceParams::Gre { .. } => "gre",
            SequenceParams::Msasha { .. } => "msasha",
            SequenceParams::LinearTest { .. } => "linear_test",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_flip = |flip: f64| -> Result<()> {
            if !(flip > 0.0 && flip < std::f64::consts::PI) {
                return Err(Error::validation(
                    "sequence params",
                    format!("flip angle {} rad outside (0, pi)", flip),
                ));
            }
            Ok(())
        };
        let check_time = |name: &str, t: f64| -> Result<()> {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::validation(
                    "sequence params",
                    format!("{} = {} must be a finite non-negative time", name, t),
                ));
            }
            Ok(())
        };
        match self {
            SequenceParams::Bssfp { flip_angle } => check_flip(*flip_angle),
            SequenceParams::Molli { flip_angle, t_inv } => {
                check_flip(*flip_angle)?;
                check_time("t_inv", *t_inv)
            }
            SequenceParams::Gre { flip_angle, tr, te } => {
                check_flip(*flip_angle)?;
                check_time("tr", *tr)?;
                check_time("te", *te)?;
                if te > tr {
                    return Err(Error::validation(
                        "sequence params",
                        format!("te {} exceeds tr {}", te, tr),
                    ));
                }
                Ok(())
            }
            SequenceParams::Msasha { ts, td, te, .. } => {
                check_time("ts", *ts)?;
                check_time("td", *td)?;
                check_time("te", *te)
            }
            SequenceParams::LinearTest { weights, offset } => {
                if weights.iter().chain([offset]).all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::validation("sequence params", "non-finite linear_test coefficients"))
                }
            }
        }
    }
}

/// A single acquired (or synthesized) image: a scalar raster plus the
/// acquisition metadata needed to re-evaluate its forward model.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Raster,
    pub params: SequenceParams,
    /// Standard deviation of the additive acquisition noise (metadata).
    pub noise_sigma: f64,
    pub seed: Option<u64>,
    /// Tissue labels propagated from the source spin map, when known.
    pub labels: Option<Vec<u8>>,
}

impl Image {
    pub fn width(&self) -> usize {
        self.data.width
    }

    pub fn height(&self) -> usize {
        self.data.height
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !self.data.all_finite() {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(())
    }
}
