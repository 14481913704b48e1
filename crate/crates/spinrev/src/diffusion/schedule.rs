//! Noise schedule tables.

use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Per-step diffusion tables: `beta_t`, `alpha_t = 1 - beta_t`, the running
/// product `alpha_bar_t`, and the reverse-step noise scale
/// `sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
///
/// Steps are 1-based (`t` in `1..=T`); `alpha_bar(0)` is 1 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `t` steps.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t < 2 {
            return Err(Error::validation("noise schedule", format!("T = {} below 2", t)));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::validation(
                "noise schedule",
                format!("need 0 < beta_start < beta_end < 1, got [{}, {}]", beta_start, beta_end),
            ));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut sigmas = Vec::with_capacity(t);
        for i in 0..t {
            let bar_prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            let var = (1.0 - bar_prev) / (1.0 - alpha_bars[i]) * betas[i];
            sigmas.push(var.sqrt());
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// The standard schedule: T = 1000, linear betas in [1e-4, 0.02].
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn t(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar_t` with the `alpha_bar_0 = 1` convention.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Reverse-step noise standard deviation for step `t -> t-1`.
    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Effective `alpha` for a (possibly strided) transition `t -> t_prev`.
    /// Equals `alpha_t` exactly for the unit stride.
    pub fn effective_alpha(&self, t: usize, t_prev: usize) -> f64 {
        debug_assert!(t_prev < t && t <= self.t());
        if t_prev + 1 == t {
            self.alphas[t - 1]
        } else {
            self.alpha_bar(t) / self.alpha_bar(t_prev)
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t() {
            return Err(Error::validation(
                "diffusion step",
                format!("t = {} outside 1..={}", t, self.t()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_hold_exactly() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for i in 0..s.t() {
            assert_eq!(s.alphas[i], 1.0 - s.betas[i]);
            let prev = if i == 0 { 1.0 } else { s.alpha_bars[i - 1] };
            assert_eq!(s.alpha_bars[i], prev * s.alphas[i]);
            let var = (1.0 - prev) / (1.0 - s.alpha_bars[i]) * s.betas[i];
            assert_eq!(s.sigmas[i], var.sqrt());
        }
    }

    #[test]
    fn two_step_alpha_bar_is_the_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(2), (1.0 - 0.1) * (1.0 - 0.2));
    }

    #[test]
    fn first_sigma_is_zero() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn default_schedule_destroys_signal() {
        let s = NoiseSchedule::default_linear();
        assert!(s.alpha_bar(s.t()) < 1e-4);
        // Strictly decreasing alpha_bar, increasing beta.
        for i in 1..s.t() {
            assert!(s.alpha_bars[i] < s.alpha_bars[i - 1]);
            assert!(s.betas[i] > s.betas[i - 1]);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1.0).is_err());
    }

    #[test]
    fn effective_alpha_matches_alpha_at_unit_stride() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.effective_alpha(5, 4), s.alphas[4]);
        let ratio = s.effective_alpha(10, 5);
        assert!((ratio - s.alpha_bar(10) / s.alpha_bar(5)).abs() < 1e-15);
    }
}
