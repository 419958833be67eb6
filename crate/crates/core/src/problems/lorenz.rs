//! Lorenz 63 with `h(gamma) = gamma^2`, observing `u1` on a uniform time grid.

use serde::{Deserialize, Serialize};

use super::{Fidelity, ForwardProblem};
use crate::diffusion::BoxPrior;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz63Problem {
    pub beta: f64,
    pub u0: [f64; 3],
    pub obs_dt: f64,
    pub n_obs: usize,
    /// RK4 substeps per observation interval.
    pub substeps: usize,
    pub noise_var: f64,
    pub prior: BoxPrior,
}

impl Default for Lorenz63Problem {
    fn default() -> Self {
        Self {
            beta: 2.0,
            u0: [-10.0, 5.0, 20.0],
            obs_dt: 0.02,
            n_obs: 51,
            substeps: 10,
            noise_var: 0.1,
            prior: BoxPrior {
                lo: vec![-5.0, 20.0],
                hi: vec![5.0, 30.0],
            },
        }
    }
}

impl Lorenz63Problem {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.prior.dim() != 2 {
            return Err(Error::Config("Lorenz parameters are (gamma, rho)".into()));
        }
        if !(self.obs_dt > 0.0) || self.n_obs == 0 || self.substeps == 0 {
            return Err(Error::Config("Lorenz time grid must be positive".into()));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::Config(
                "Lorenz noise variance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `u1` at `t = 0, obs_dt, ..., (n_obs - 1) obs_dt`.
    pub fn trajectory(&self, gamma: f64, rho: f64, substeps: usize) -> Result<Vec<f64>> {
        let s = gamma * gamma;
        let beta = self.beta;
        let f = |u: [f64; 3]| {
            [
                s * (u[1] - u[0]),
                u[0] * (rho - u[2]) - u[1],
                u[0] * u[1] - beta * u[2],
            ]
        };
        let h = self.obs_dt / substeps as f64;
        let mut u = self.u0;
        let mut out = Vec::with_capacity(self.n_obs);
        out.push(u[0]);
        for k in 1..self.n_obs {
            for _ in 0..substeps {
                let k1 = f(u);
                let k2 = f(axpy(u, 0.5 * h, k1));
                let k3 = f(axpy(u, 0.5 * h, k2));
                let k4 = f(axpy(u, h, k3));
                for j in 0..3 {
                    u[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Unstable(format!(
                    "Lorenz state non-finite at observation {k} for ({gamma}, {rho})"
                )));
            }
            out.push(u[0]);
        }
        Ok(out)
    }
}

fn axpy(u: [f64; 3], a: f64, k: [f64; 3]) -> [f64; 3] {
    [u[0] + a * k[0], u[1] + a * k[1], u[2] + a * k[2]]
}

/// Default-configuration observation of `u1` at 51 times on `[0, 1]`.
pub fn lorenz_observe(gamma: f64, rho: f64) -> Result<Vec<f64>> {
    let p = Lorenz63Problem::default();
    p.trajectory(gamma, rho, p.substeps)
}

impl ForwardProblem for Lorenz63Problem {
    fn name(&self) -> &'static str {
        "lorenz63"
    }

    fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    fn dim_y(&self) -> usize {
        self.n_obs
    }

    fn noise_var(&self) -> Result<Vec<f64>> {
        Ok(vec![self.noise_var; self.n_obs])
    }

    fn observe(&self, theta: &[f64], _fidelity: Fidelity) -> Result<Vec<f64>> {
        if theta.len() != 2 {
            return Err(Error::dims(2, theta.len(), "Lorenz parameters"));
        }
        self.trajectory(theta[0], theta[1], self.substeps)
    }
}
