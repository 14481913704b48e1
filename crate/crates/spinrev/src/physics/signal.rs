//! Per-voxel signal equations and analytic gradients.
//!
//! All four sequences share the convention that the first spin property is
//! the signal scale: proton density for bSSFP/MOLLI/GRE, the fitted
//! amplitude `A` for mSASHA. Every equation is positively homogeneous of
//! degree one in that scale.

use crate::error::{Error, Result};
use crate::physics::{SaturationExponentMode, SequenceParams};

fn check_relaxation(t1: f64, t2: f64) -> Result<()> {
    if t1 <= 0.0 || t2 <= 0.0 || !t1.is_finite() || !t2.is_finite() {
        return Err(Error::SingularInput(format!(
            "relaxation times must be positive and finite (t1 {}, t2 {})",
            t1, t2
        )));
    }
    Ok(())
}

/// Balanced SSFP steady-state signal:
/// `PD sin(w) / (1 + cos(w) + (1 - cos(w)) T1/T2)`.
pub fn bssfp_signal(pd: f64, t1: f64, t2: f64, flip_angle: f64) -> Result<f64> {
    check_relaxation(t1, t2)?;
    let c = flip_angle.cos();
    let denom = 1.0 + c + (1.0 - c) * t1 / t2;
    Ok(pd * flip_angle.sin() / denom)
}

fn bssfp_with_gradient(pd: f64, t1: f64, t2: f64, flip_angle: f64) -> Result<(f64, [f64; 3])> {
    check_relaxation(t1, t2)?;
    let s = flip_angle.sin();
    let c = flip_angle.cos();
    let denom = 1.0 + c + (1.0 - c) * t1 / t2;
    let f = pd * s / denom;
    let d_pd = s / denom;
    let d_t1 = -pd * s * (1.0 - c) / t2 / (denom * denom);
    let d_t2 = pd * s * (1.0 - c) * t1 / (t2 * t2) / (denom * denom);
    Ok((f, [d_pd, d_t1, d_t2]))
}

/// Auxiliary quantities of the phase-insensitive inversion-recovery readout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MolliParts {
    /// Steady-state signal the recovery relaxes towards (the bSSFP value).
    pub steady_state: f64,
    /// Apparent relaxation time during continuous readout.
    pub t1_star: f64,
    /// Effective inversion factor.
    pub inv: f64,
}

/// T1* and INV for the MOLLI readout, exposed for tests and curve analysis.
pub fn molli_parts(pd: f64, t1: f64, t2: f64, flip_angle: f64) -> Result<MolliParts> {
    check_relaxation(t1, t2)?;
    let half = 0.5 * flip_angle;
    let c = flip_angle.cos();
    let r1_star = half.cos().powi(2) / t1 + half.sin().powi(2) / t2;
    let denom = 1.0 + c + (1.0 - c) * t1 / t2;
    Ok(MolliParts {
        steady_state: pd * flip_angle.sin() / denom,
        t1_star: 1.0 / r1_star,
        inv: 1.0 + half.sin() / flip_angle.sin() * denom,
    })
}

/// MOLLI magnitude signal at inversion time `t_inv`:
/// `| f_ss (1 - INV exp(-t_inv / T1*)) |`.
pub fn molli_signal(pd: f64, t1: f64, t2: f64, flip_angle: f64, t_inv: f64) -> Result<f64> {
    let parts = molli_parts(pd, t1, t2, flip_angle)?;
    let recovered = 1.0 - parts.inv * (-t_inv / parts.t1_star).exp();
    Ok((parts.steady_state * recovered).abs())
}

fn molli_with_gradient(
    pd: f64,
    t1: f64,
    t2: f64,
    flip_angle: f64,
    t_inv: f64,
) -> Result<(f64, [f64; 3])> {
    check_relaxation(t1, t2)?;
    let s = flip_angle.sin();
    let c = flip_angle.cos();
    let half = 0.5 * flip_angle;
    let ch2 = half.cos().powi(2);
    let sh2 = half.sin().powi(2);

    let denom = 1.0 + c + (1.0 - c) * t1 / t2;
    let fss = pd * s / denom;
    let fss_pd = s / denom;
    let fss_t1 = -pd * s * (1.0 - c) / t2 / (denom * denom);
    let fss_t2 = pd * s * (1.0 - c) * t1 / (t2 * t2) / (denom * denom);

    let k = half.sin() / s;
    let inv = 1.0 + k * denom;
    let inv_t1 = k * (1.0 - c) / t2;
    let inv_t2 = -k * (1.0 - c) * t1 / (t2 * t2);

    let r1_star = ch2 / t1 + sh2 / t2;
    let e = (-t_inv * r1_star).exp();
    // d/dt of exp(-t_inv r1*) with dr1*/dt1 = -ch2/t1^2, dr1*/dt2 = -sh2/t2^2
    let e_t1 = e * t_inv * ch2 / (t1 * t1);
    let e_t2 = e * t_inv * sh2 / (t2 * t2);

    let recovered = 1.0 - inv * e;
    let m = fss * recovered;
    let m_pd = fss_pd * recovered;
    let m_t1 = fss_t1 * recovered - fss * (inv_t1 * e + inv * e_t1);
    let m_t2 = fss_t2 * recovered - fss * (inv_t2 * e + inv * e_t2);

    // Magnitude readout: subgradient sign fixed to +1 at the null crossing.
    let sign = if m < 0.0 { -1.0 } else { 1.0 };
    Ok((m.abs(), [sign * m_pd, sign * m_t1, sign * m_t2]))
}

/// Spoiled gradient-echo signal:
/// `PD sin(w) (1 - E1) / (1 - cos(w) E1) E2`.
pub fn gre_signal(pd: f64, t1: f64, t2: f64, flip_angle: f64, tr: f64, te: f64) -> Result<f64> {
    check_relaxation(t1, t2)?;
    let c = flip_angle.cos();
    let e1 = (-tr / t1).exp();
    let e2 = (-te / t2).exp();
    Ok(pd * flip_angle.sin() * (1.0 - e1) / (1.0 - c * e1) * e2)
}

fn gre_with_gradient(
    pd: f64,
    t1: f64,
    t2: f64,
    flip_angle: f64,
    tr: f64,
    te: f64,
) -> Result<(f64, [f64; 3])> {
    check_relaxation(t1, t2)?;
    let s = flip_angle.sin();
    let c = flip_angle.cos();
    let e1 = (-tr / t1).exp();
    let e2 = (-te / t2).exp();
    let denom = 1.0 - c * e1;
    let g = (1.0 - e1) / denom;
    let f = pd * s * g * e2;
    let g_e1 = (c - 1.0) / (denom * denom);
    let e1_t1 = e1 * tr / (t1 * t1);
    let e2_t2 = e2 * te / (t2 * t2);
    Ok((
        f,
        [s * g * e2, pd * s * e2 * g_e1 * e1_t1, pd * s * g * e2_t2],
    ))
}

/// mSASHA signal for a saturation-recovery block (time `ts`), T2-prep echo
/// (`te`) and trigger delay (`td`):
/// `A {1 - [1 - (1 - exp(-TS/X)) exp(-TE/T2)] exp(-TD/T1)}`
/// with `X = T1` in `Physical` mode and `X = TE` in `PaperVerbatim` mode.
pub fn msasha_signal(
    a: f64,
    t1: f64,
    t2: f64,
    ts: f64,
    td: f64,
    te: f64,
    mode: SaturationExponentMode,
) -> Result<f64> {
    msasha_with_gradient(a, t1, t2, ts, td, te, mode).map(|(f, _)| f)
}

fn saturation_recovery(
    t1: f64,
    ts: f64,
    te: f64,
    mode: SaturationExponentMode,
) -> (f64, f64) {
    // Returns (sr, d sr / d t1).
    if ts == 0.0 {
        return (0.0, 0.0);
    }
    match mode {
        SaturationExponentMode::Physical => {
            let w = (-ts / t1).exp();
            (1.0 - w, -w * ts / (t1 * t1))
        }
        SaturationExponentMode::PaperVerbatim => {
            if te == 0.0 {
                (1.0, 0.0)
            } else {
                ((1.0 - (-ts / te).exp()), 0.0)
            }
        }
    }
}

fn msasha_with_gradient(
    a: f64,
    t1: f64,
    t2: f64,
    ts: f64,
    td: f64,
    te: f64,
    mode: SaturationExponentMode,
) -> Result<(f64, [f64; 3])> {
    check_relaxation(t1, t2)?;
    let (sr, sr_t1) = saturation_recovery(t1, ts, te, mode);
    let u = (-te / t2).exp();
    let v = (-td / t1).exp();
    let u_t2 = u * te / (t2 * t2);
    let v_t1 = v * td / (t1 * t1);
    let bracket = 1.0 - sr * u;
    let f = a * (1.0 - bracket * v);
    let d_a = 1.0 - bracket * v;
    let d_t1 = -a * (-u * sr_t1 * v + bracket * v_t1);
    let d_t2 = a * sr * u_t2 * v;
    Ok((f, [d_a, d_t1, d_t2]))
}

/// Evaluate the signal equation of `params` at one voxel.
pub fn signal(v: [f64; 3], params: &SequenceParams) -> Result<f64> {
    let [pd, t1, t2] = v;
    match params {
        SequenceParams::Bssfp { flip_angle } => bssfp_signal(pd, t1, t2, *flip_angle),
        SequenceParams::Molli { flip_angle, t_inv } => {
            molli_signal(pd, t1, t2, *flip_angle, *t_inv)
        }
        SequenceParams::Gre { flip_angle, tr, te } => gre_signal(pd, t1, t2, *flip_angle, *tr, *te),
        SequenceParams::Msasha {
            ts,
            td,
            te,
            saturation_exponent_mode,
        } => msasha_signal(pd, t1, t2, *ts, *td, *te, *saturation_exponent_mode),
        SequenceParams::LinearTest { weights, offset } => {
            Ok(weights[0] * pd + weights[1] * t1 + weights[2] * t2 + offset)
        }
    }
}

/// Signal and its analytic gradient `(df/dPD, df/dT1, df/dT2)` at one voxel.
pub fn signal_with_gradient(v: [f64; 3], params: &SequenceParams) -> Result<(f64, [f64; 3])> {
    let [pd, t1, t2] = v;
    match params {
        SequenceParams::Bssfp { flip_angle } => bssfp_with_gradient(pd, t1, t2, *flip_angle),
        SequenceParams::Molli { flip_angle, t_inv } => {
            molli_with_gradient(pd, t1, t2, *flip_angle, *t_inv)
        }
        SequenceParams::Gre { flip_angle, tr, te } => {
            gre_with_gradient(pd, t1, t2, *flip_angle, *tr, *te)
        }
        SequenceParams::Msasha {
            ts,
            td,
            te,
            saturation_exponent_mode,
        } => msasha_with_gradient(pd, t1, t2, *ts, *td, *te, *saturation_exponent_mode),
        SequenceParams::LinearTest { weights, offset } => Ok((
            weights[0] * pd + weights[1] * t1 + weights[2] * t2 + offset,
            *weights,
        )),
    }
}

/// Analytic gradient alone.
pub fn signal_gradient(v: [f64; 3], params: &SequenceParams) -> Result<[f64; 3]> {
    signal_with_gradient(v, params).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    const DEG45: f64 = std::f64::consts::FRAC_PI_4;
    const DEG90: f64 = std::f64::consts::FRAC_PI_2;

    fn central_difference(v: [f64; 3], params: &SequenceParams) -> [f64; 3] {
        let mut grad = [0.0; 3];
        for (i, g) in grad.iter_mut().enumerate() {
            let h = 1e-3 * v[i].abs().max(1e-3);
            let mut hi = v;
            hi[i] += h;
            let mut lo = v;
            lo[i] -= h;
            *g = (signal(hi, params).unwrap() - signal(lo, params).unwrap()) / (2.0 * h);
        }
        grad
    }

    fn assert_gradient_close(v: [f64; 3], params: &SequenceParams, tol: f64) {
        let analytic = signal_gradient(v, params).unwrap();
        let numeric = central_difference(v, params);
        for i in 0..3 {
            let scale = analytic[i].abs().max(numeric[i].abs());
            if scale < 1e-12 {
                continue;
            }
            assert!(
                (analytic[i] - numeric[i]).abs() / scale < tol,
                "component {} of {:?} at {:?}: analytic {} vs numeric {}",
                i,
                params,
                v,
                analytic[i],
                numeric[i]
            );
        }
    }

    /// Default tissue classes used across gradient checks.
    fn tissue_draws() -> Vec<[f64; 3]> {
        vec![
            [0.9, 1550.0, 240.0],
            [0.7, 950.0, 50.0],
            [1.0, 260.0, 80.0],
        ]
    }

    fn all_params() -> Vec<SequenceParams> {
        vec![
            SequenceParams::Bssfp { flip_angle: DEG45 },
            SequenceParams::Molli {
                flip_angle: DEG45,
                t_inv: 800.0,
            },
            SequenceParams::Gre {
                flip_angle: DEG45,
                tr: 6.0,
                te: 1.5,
            },
            SequenceParams::Msasha {
                ts: 450.0,
                td: 40.0,
                te: 30.0,
                saturation_exponent_mode: SaturationExponentMode::Physical,
            },
            SequenceParams::Msasha {
                ts: 450.0,
                td: 40.0,
                te: 30.0,
                saturation_exponent_mode: SaturationExponentMode::PaperVerbatim,
            },
        ]
    }

    #[test]
    fn bssfp_unit_ratio_collapses_denominator() {
        // T1/T2 = 1 makes the denominator exactly 2.
        for t in [10.0, 100.0, 1500.0] {
            let f = bssfp_signal(1.0, t, t, DEG45).unwrap();
            assert_abs_diff_eq!(f, DEG45.sin() / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bssfp_right_angle() {
        let f = bssfp_signal(1.0, 1000.0, 200.0, DEG90).unwrap();
        assert_abs_diff_eq!(f, 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn bssfp_reference_value() {
        let f = bssfp_signal(0.8, 950.0, 50.0, DEG45).unwrap();
        assert_abs_diff_eq!(f, 0.077789, epsilon = 1e-6);
    }

    #[test]
    fn bssfp_rejects_zero_t2() {
        assert!(bssfp_signal(1.0, 1000.0, 0.0, DEG45).is_err());
    }

    #[test]
    fn molli_long_inversion_reaches_steady_state() {
        for v in tissue_draws() {
            let parts = molli_parts(v[0], v[1], v[2], DEG45).unwrap();
            let f = molli_signal(v[0], v[1], v[2], DEG45, 50.0 * parts.t1_star).unwrap();
            assert_relative_eq!(f, parts.steady_state, max_relative = 1e-12);
        }
    }

    #[test]
    fn molli_null_crossing() {
        for v in tissue_draws() {
            let parts = molli_parts(v[0], v[1], v[2], DEG45).unwrap();
            let t_null = parts.t1_star * parts.inv.ln();
            let f = molli_signal(v[0], v[1], v[2], DEG45, t_null).unwrap();
            assert_abs_diff_eq!(f, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn molli_zero_inversion_time() {
        for v in tissue_draws() {
            let parts = molli_parts(v[0], v[1], v[2], DEG45).unwrap();
            let f = molli_signal(v[0], v[1], v[2], DEG45, 0.0).unwrap();
            assert_relative_eq!(
                f,
                (parts.steady_state * (1.0 - parts.inv)).abs(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn molli_reduces_to_bssfp_at_long_t_inv() {
        for v in tissue_draws() {
            let parts = molli_parts(v[0], v[1], v[2], DEG45).unwrap();
            let molli = molli_signal(v[0], v[1], v[2], DEG45, 50.0 * parts.t1_star).unwrap();
            let bssfp = bssfp_signal(v[0], v[1], v[2], DEG45).unwrap();
            assert_relative_eq!(molli, bssfp, max_relative = 1e-10);
        }
    }

    #[test]
    fn gre_te_zero_long_tr_recovers_pd() {
        let pd = 0.85;
        let f = gre_signal(pd, 400.0, 60.0, DEG90, 50.0 * 400.0, 0.0).unwrap();
        assert_relative_eq!(f, pd, max_relative = 1e-12);
    }

    #[test]
    fn gre_short_te_scales_by_e2() {
        // TE = 1.5 ms on T2 = 50 ms multiplies the TE=0 signal by exp(-0.03).
        let base = gre_signal(0.7, 950.0, 50.0, DEG45, 6.0, 0.0).unwrap();
        let with_te = gre_signal(0.7, 950.0, 50.0, DEG45, 6.0, 1.5).unwrap();
        assert_relative_eq!(with_te / base, (-0.03_f64).exp(), max_relative = 1e-12);
        assert_abs_diff_eq!((-0.03_f64).exp(), 0.970446, epsilon = 1e-6);
    }

    #[test]
    fn gre_vanishes_as_tr_goes_to_zero() {
        let f = gre_signal(1.0, 1000.0, 100.0, DEG45, 1e-6 * 1000.0, 0.0).unwrap();
        assert!(f.abs() < 1e-5, "signal {} should vanish with tr", f);
    }

    #[test]
    fn gre_increasing_in_tr() {
        let mut last = -1.0;
        for tr in [1.0, 5.0, 20.0, 100.0, 500.0, 5000.0] {
            let f = gre_signal(1.0, 950.0, 50.0, DEG45, tr, 0.0).unwrap();
            assert!(f >= 0.0);
            assert!(f > last, "signal must increase with tr");
            last = f;
        }
    }

    #[test]
    fn msasha_full_recovery_returns_amplitude() {
        let a = 1.3;
        for mode in [
            SaturationExponentMode::Physical,
            SaturationExponentMode::PaperVerbatim,
        ] {
            let f = msasha_signal(a, 950.0, 50.0, 600.0, 50.0 * 950.0, 25.0, mode).unwrap();
            assert_relative_eq!(f, a, max_relative = 1e-12);
        }
    }

    #[test]
    fn msasha_zero_ts_is_pure_saturation_recovery() {
        let a = 0.9;
        let (t1, td) = (950.0, 120.0);
        let f = msasha_signal(a, t1, 50.0, 0.0, td, 25.0, SaturationExponentMode::Physical).unwrap();
        assert_relative_eq!(f, a * (1.0 - (-td / t1).exp()), max_relative = 1e-12);
    }

    #[test]
    fn msasha_zero_te_full_ts_returns_amplitude() {
        let a = 1.1;
        let t1 = 800.0;
        let f =
            msasha_signal(a, t1, 60.0, 50.0 * t1, 0.0, 0.0, SaturationExponentMode::Physical)
                .unwrap();
        assert_relative_eq!(f, a, max_relative = 1e-12);
    }

    #[test]
    fn msasha_modes_differ_when_ts_finite() {
        let phys =
            msasha_signal(1.0, 950.0, 50.0, 450.0, 40.0, 30.0, SaturationExponentMode::Physical)
                .unwrap();
        let verbatim = msasha_signal(
            1.0,
            950.0,
            50.0,
            450.0,
            40.0,
            30.0,
            SaturationExponentMode::PaperVerbatim,
        )
        .unwrap();
        assert!((phys - verbatim).abs() > 1e-6);
    }

    #[test]
    fn bssfp_pd_gradient_is_signal_over_pd() {
        let p = SequenceParams::Bssfp { flip_angle: DEG45 };
        let v = [0.8, 950.0, 50.0];
        let f = signal(v, &p).unwrap();
        let g = signal_gradient(v, &p).unwrap();
        assert_relative_eq!(g[0], f / v[0], max_relative = 1e-12);
    }

    #[test]
    fn linear_test_gradient_is_weight_vector() {
        let p = SequenceParams::LinearTest {
            weights: [0.5, 4e-4, 1e-3],
            offset: 0.05,
        };
        for v in tissue_draws() {
            assert_eq!(signal_gradient(v, &p).unwrap(), [0.5, 4e-4, 1e-3]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_at_tissue_classes() {
        for params in all_params() {
            for v in tissue_draws() {
                assert_gradient_close(v, &params, 1e-5);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_at_random_draws() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "gradient_check");
        for _ in 0..100 {
            let v = [
                rng.gen_range(0.2..1.2),
                rng.gen_range(100.0..2500.0),
                rng.gen_range(20.0..400.0),
            ];
            for params in all_params() {
                assert_gradient_close(v, &params, 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn homogeneous_in_scale(
            pd in 0.05_f64..1.5,
            t1 in 100.0_f64..2500.0,
            t2 in 20.0_f64..400.0,
            c in 0.1_f64..10.0,
        ) {
            for params in all_params() {
                if matches!(params, SequenceParams::LinearTest { .. }) {
                    continue;
                }
                let base = signal([pd, t1, t2], &params).unwrap();
                let scaled = signal([c * pd, t1, t2], &params).unwrap();
                prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + scaled.abs().max(c * base.abs())));
            }
        }
    }
}
