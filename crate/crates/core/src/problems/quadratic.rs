use serde::{Deserialize, Serialize};

use super::quadrature::adaptive_simpson;
use super::{Fidelity, ForwardProblem};
use crate::diffusion::BoxPrior;
use crate::error::{Error, Result};

/// `y = theta^2 + eps`, `eps ~ N(0, noise_var)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticProblem {
    pub noise_var: f64,
    pub prior: BoxPrior,
}

impl Default for QuadraticProblem {
    fn default() -> Self {
        Self {
            noise_var: 0.1,
            prior: BoxPrior {
                lo: vec![-10.0],
                hi: vec![10.0],
            },
        }
    }
}

impl QuadraticProblem {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.prior.dim() != 1 {
            return Err(Error::Config("quadratic problem is one-dimensional".into()));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::Config("noise variance must be positive".into()));
        }
        Ok(())
    }

    pub fn posterior(&self, y: f64) -> QuadraticPosterior {
        QuadraticPosterior::new(y, self.noise_var, self.prior.lo[0], self.prior.hi[0])
    }
}

impl ForwardProblem for QuadraticProblem {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    fn dim_y(&self) -> usize {
        1
    }

    fn noise_var(&self) -> Result<Vec<f64>> {
        Ok(vec![self.noise_var])
    }

    fn observe(&self, theta: &[f64], _fidelity: Fidelity) -> Result<Vec<f64>> {
        if theta.len() != 1 {
            return Err(Error::dims(1, theta.len(), "quadratic parameter"));
        }
        Ok(vec![theta[0] * theta[0]])
    }
}

/// Normalized posterior `p(theta | y)` under a uniform prior on `[lo, hi]`.
#[derive(Clone, Debug)]
pub struct QuadraticPosterior {
    pub y: f64,
    pub noise_var: f64,
    pub lo: f64,
    pub hi: f64,
    pub log_z: f64,
}

impl QuadraticPosterior {
    pub fn new(y: f64, noise_var: f64, lo: f64, hi: f64) -> Self {
        // peak value is 1, so the unnormalized integral never underflows
        let kernel = |t: f64| (-(y - t * t).powi(2) / (2.0 * noise_var)).exp();
        let z = adaptive_simpson(kernel, lo, hi, 4000, 1e-13);
        Self {
            y,
            noise_var,
            lo,
            hi,
            log_z: z.ln(),
        }
    }

    pub fn log_pdf(&self, theta: f64) -> f64 {
        if theta < self.lo || theta > self.hi {
            return f64::NEG_INFINITY;
        }
        -(self.y - theta * theta).powi(2) / (2.0 * self.noise_var) - self.log_z
    }

    pub fn pdf(&self, theta: f64) -> f64 {
        self.log_pdf(theta).exp()
    }
}

/// Analytic posterior density with noise variance 0.1 on `[-10, 10]`.
pub fn quadratic_posterior_pdf(theta: f64, y: f64) -> f64 {
    QuadraticPosterior::new(y, 0.1, -10.0, 10.0).pdf(theta)
}
