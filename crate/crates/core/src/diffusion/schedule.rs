use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of the variance-preserving-style forward process with
/// `alpha = 1 - tau` and `beta^2 = tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleCoeffs {
    pub alpha: f64,
    pub beta_sq: f64,
    /// `b(tau) = d log(alpha) / d tau`
    pub drift: f64,
    /// `sigma^2(tau) = d beta^2 / d tau - 2 b(tau) beta^2`
    pub diffusion_sq: f64,
}

impl ScheduleCoeffs {
    pub fn at(tau: f64) -> Self {
        let alpha = 1.0 - tau;
        let drift = -1.0 / alpha;
        Self {
            alpha,
            beta_sq: tau,
            drift,
            diffusion_sq: 1.0 - 2.0 * drift * tau,
        }
    }
}

/// Pseudo-time clamps and step count for the reverse probability-flow ODE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub n_steps: usize,
    /// Replace the terminal state by the denoised estimate `(z + beta^2 S) / alpha`
    /// after integrating down to `eps_lo`.
    pub denoise_final: bool,
    /// Run the flow with the parameter atoms mapped affinely onto `[-1, 1]`
    /// per coordinate, mapping the results back. Needed when the target is
    /// much narrower than `sqrt(eps_lo)` in raw units.
    pub normalize_atoms: bool,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            eps_lo: 1e-3,
            eps_hi: 1e-3,
            n_steps: 500,
            denoise_final: true,
            normalize_atoms: false,
        }
    }
}

const CLAMP_SLACK: f64 = 1e-12;

impl DiffusionSchedule {
    pub fn new(eps_lo: f64, eps_hi: f64, n_steps: usize) -> Result<Self> {
        let s = Self {
            eps_lo,
            eps_hi,
            n_steps,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |e: f64| e > 0.0 && e < 0.5;
        if !ok(self.eps_lo) || !ok(self.eps_hi) {
            return Err(Error::invalid(format!(
                "clamps must lie in (0, 0.5): eps_lo={}, eps_hi={}",
                self.eps_lo, self.eps_hi
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be positive"));
        }
        Ok(())
    }

    pub fn tau_start(&self) -> f64 {
        1.0 - self.eps_hi
    }

    pub fn tau_end(&self) -> f64 {
        self.eps_lo
    }

    pub fn check_tau(&self, tau: f64) -> Result<()> {
        let (lo, hi) = (self.eps_lo, 1.0 - self.eps_hi);
        if !(tau >= lo - CLAMP_SLACK && tau <= hi + CLAMP_SLACK) {
            return Err(Error::TauOutOfRange { tau, lo, hi });
        }
        Ok(())
    }

    /// Schedule coefficients at `tau`, rejecting pseudo-times outside the clamps.
    pub fn coeffs(&self, tau: f64) -> Result<ScheduleCoeffs> {
        self.check_tau(tau)?;
        Ok(ScheduleCoeffs::at(tau))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_at_half() {
        let c = DiffusionSchedule::default().coeffs(0.5).unwrap();
        assert_eq!(
            (c.alpha, c.beta_sq, c.drift, c.diffusion_sq),
            (0.5, 0.5, -2.0, 3.0)
        );
    }

    #[test]
    fn coefficients_near_lower_clamp() {
        let c = DiffusionSchedule::default().coeffs(1e-3).unwrap();
        assert!((c.alpha - 0.999).abs() < 1e-15);
        assert_eq!(c.beta_sq, 1e-3);
    }

    #[test]
    fn coefficients_at_point_nine() {
        let c = DiffusionSchedule::default().coeffs(0.9).unwrap();
        assert!((c.drift + 10.0).abs() < 1e-12);
        assert!((c.diffusion_sq - 19.0).abs() < 1e-12);
    }

    #[test]
    fn coefficients_match_symbolic_derivatives() {
        // b = d/dtau log(1 - tau), sigma^2 = 1 - 2 b tau, by central differences
        for tau in [0.01f64, 0.2, 0.5, 0.77, 0.99] {
            let h = 1e-6f64;
            let b_fd = ((1.0 - (tau + h)).ln() - (1.0 - (tau - h)).ln()) / (2.0 * h);
            let c = ScheduleCoeffs::at(tau);
            assert!((c.drift - b_fd).abs() < 1e-6 * c.drift.abs().max(1.0));
            assert!((c.diffusion_sq - (1.0 - 2.0 * b_fd * tau)).abs() < 1e-5 * c.diffusion_sq);
        }
    }

    #[test]
    fn out_of_clamp_tau_is_rejected() {
        let s = DiffusionSchedule::default();
        assert!(matches!(s.coeffs(0.0), Err(Error::TauOutOfRange { .. })));
        assert!(matches!(s.coeffs(1.0), Err(Error::TauOutOfRange { .. })));
        assert!(s.coeffs(s.tau_start()).is_ok());
        assert!(s.coeffs(s.tau_end()).is_ok());
    }

    #[test]
    fn invalid_clamps() {
        assert!(DiffusionSchedule::new(0.0, 1e-3, 10).is_err());
        assert!(DiffusionSchedule::new(1e-3, 0.6, 10).is_err());
        assert!(DiffusionSchedule::new(1e-3, 1e-3, 0).is_err());
    }
}
