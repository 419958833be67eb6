//! Ornstein-Uhlenbeck SDE `dY = (mu^2 - Y) dt + sigma^2 dW` observed through the
//! Monte-Carlo mean and standard deviation of `Y_T`.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::covariance::estimate_obs_covariance;
use super::{Fidelity, ForwardProblem};
use crate::diffusion::BoxPrior;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// How the observation covariance is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSpec {
    Fixed(Vec<f64>),
    /// Mean squared deviation between `fidelity` statistics and the reference
    /// statistics at `n_grid` uniform draws from `region` (default: the prior).
    Estimate {
        n_grid: usize,
        seed: u64,
        #[serde(default)]
        region: Option<BoxPrior>,
        #[serde(default = "low")]
        fidelity: Fidelity,
    },
}

fn low() -> Fidelity {
    Fidelity::Low
}

/// Path banks and the covariance are computed on first use and cached, so
/// settings should not be changed after the problem has been evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuSdeProblem {
    pub y0: f64,
    pub t_end: f64,
    pub em_dt: f64,
    pub n_mc_low: usize,
    pub n_mc_high: usize,
    pub n_mc_reference: usize,
    /// Seed of the Brownian paths; shared by every parameter value.
    pub path_seed: u64,
    pub covariance: CovarianceSpec,
    pub prior: BoxPrior,
    #[serde(skip)]
    cache: OuCache,
}

impl Default for OuSdeProblem {
    fn default() -> Self {
        Self {
            y0: 1.5,
            t_end: 1.0,
            em_dt: 1e-3,
            n_mc_low: 2000,
            n_mc_high: 10_000,
            n_mc_reference: 100_000,
            path_seed: 0,
            covariance: CovarianceSpec::Estimate {
                n_grid: 20,
                seed: 0,
                region: None,
                fidelity: Fidelity::Low,
            },
            prior: BoxPrior {
                lo: vec![-10.0, -10.0],
                hi: vec![10.0, 10.0],
            },
            cache: OuCache::default(),
        }
    }
}

#[derive(Clone, Default)]
struct OuCache {
    low: OnceLock<Arc<OuPathBank>>,
    high: OnceLock<Arc<OuPathBank>>,
    reference: OnceLock<Arc<OuPathBank>>,
    cov: OnceLock<Vec<f64>>,
}

impl std::fmt::Debug for OuCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("OuCache")
    }
}

impl PartialEq for OuCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Per-path noise functionals of Euler-Maruyama on the linear SDE.
///
/// With `r = 1 - dt`, the scheme `Y <- r Y + a dt + s sqrt(dt) xi` gives
/// `Y_n = a + (Y0 - a) r^n + s W` with `W <- r W + sqrt(dt) xi`, so the
/// sample statistics for any `(a, s)` follow from the mean and standard
/// deviation of `W` over the paths.
#[derive(Clone, Debug)]
pub struct OuPathBank {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub decay: f64,
    pub w_mean: f64,
    pub w_std: f64,
}

fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    let n = (t_end / dt).round();
    if !(n >= 1.0) || (n * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::invalid(format!(
            "time step {dt} does not divide the horizon {t_end}"
        )));
    }
    Ok(n as usize)
}

impl OuPathBank {
    pub fn new(seed: u64, purpose: Purpose, n_paths: usize, dt: f64, t_end: f64) -> Result<Self> {
        if n_paths < 2 {
            return Err(Error::invalid(
                "at least two Monte-Carlo paths are required",
            ));
        }
        let n_steps = step_count(t_end, dt)?;
        let r = 1.0 - dt;
        let sq = dt.sqrt();
        let mut xi = vec![0.0; n_steps];
        let w: Vec<f64> = (0..n_paths)
            .map(|j| {
                let mut g = rng::stream(seed, purpose, j as u64);
                rng::fill_normal(&mut g, &mut xi);
                xi.iter().fold(0.0, |w, x| r * w + sq * x)
            })
            .collect();
        let (w_mean, w_std) = mean_std(&w);
        Ok(Self {
            n_paths,
            n_steps,
            dt,
            decay: r.powi(n_steps as i32),
            w_mean,
            w_std,
        })
    }

    /// Sample mean and standard deviation of `Y_T`.
    pub fn statistics(&self, y0: f64, mu: f64, sigma: f64) -> [f64; 2] {
        let a = mu * mu;
        let s = sigma * sigma;
        [a + (y0 - a) * self.decay + s * self.w_mean, s * self.w_std]
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Direct Euler-Maruyama: `n_mc` paths from `y0` to `t_end`, path `j` driven by
/// stream `(seed, MonteCarloPaths, j)`. Returns sample mean and std of `Y_T`.
#[allow(clippy::too_many_arguments)]
pub fn ou_statistics_em(
    mu: f64,
    sigma: f64,
    y0: f64,
    t_end: f64,
    dt: f64,
    n_mc: usize,
    seed: u64,
) -> Result<[f64; 2]> {
    if n_mc < 2 {
        return Err(Error::invalid(
            "at least two Monte-Carlo paths are required",
        ));
    }
    let n_steps = step_count(t_end, dt)?;
    let (a, s) = (mu * mu, sigma * sigma);
    let sq = dt.sqrt();
    let mut xi = vec![0.0; n_steps];
    let ys: Vec<f64> = (0..n_mc)
        .map(|j| {
            let mut g = rng::stream(seed, Purpose::MonteCarloPaths, j as u64);
            rng::fill_normal(&mut g, &mut xi);
            xi.iter().fold(y0, |y, x| y + (a - y) * dt + s * sq * x)
        })
        .collect();
    let (m, sd) = mean_std(&ys);
    Ok([m, sd])
}

/// Default-configuration statistics (`Y0 = 1.5`, `T = 1`).
pub fn ou_statistics(mu: f64, sigma: f64, n_mc: usize, seed: u64) -> Result<[f64; 2]> {
    let p = OuSdeProblem::default();
    ou_statistics_em(mu, sigma, p.y0, p.t_end, p.em_dt, n_mc, seed)
}

/// Closed-form mean and standard deviation of `Y_T`.
pub fn ou_exact_moments(mu: f64, sigma: f64, y0: f64, t: f64) -> [f64; 2] {
    let a = mu * mu;
    [
        a + (y0 - a) * (-t).exp(),
        sigma * sigma * ((1.0 - (-2.0 * t).exp()) / 2.0).sqrt(),
    ]
}

impl OuSdeProblem {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.prior.dim() != 2 {
            return Err(Error::Config("OU parameters are (mu, sigma)".into()));
        }
        step_count(self.t_end, self.em_dt).map_err(|e| Error::Config(e.to_string()))?;
        if self.n_mc_low < 2 || self.n_mc_high < 2 || self.n_mc_reference < 2 {
            return Err(Error::Config("OU path counts must be at least 2".into()));
        }
        match &self.covariance {
            CovarianceSpec::Fixed(v) if v.len() != 2 || v.iter().any(|x| !(*x > 0.0)) => Err(
                Error::Config("fixed OU covariance needs two positive entries".into()),
            ),
            CovarianceSpec::Estimate { n_grid: 0, .. } => Err(Error::Config(
                "covariance estimation needs n_grid >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    fn bank(&self, which: Option<Fidelity>) -> Result<Arc<OuPathBank>> {
        let (cell, n, purpose) = match which {
            Some(Fidelity::Low) => (&self.cache.low, self.n_mc_low, Purpose::MonteCarloPaths),
            Some(Fidelity::High) => (&self.cache.high, self.n_mc_high, Purpose::MonteCarloPaths),
            None => (
                &self.cache.reference,
                self.n_mc_reference,
                Purpose::Reference,
            ),
        };
        if let Some(b) = cell.get() {
            return Ok(b.clone());
        }
        let b = Arc::new(OuPathBank::new(
            self.path_seed,
            purpose,
            n,
            self.em_dt,
            self.t_end,
        )?);
        Ok(cell.get_or_init(|| b).clone())
    }

    fn check(theta: &[f64]) -> Result<()> {
        if theta.len() != 2 {
            return Err(Error::dims(2, theta.len(), "OU parameters"));
        }
        Ok(())
    }
}

impl ForwardProblem for OuSdeProblem {
    fn name(&self) -> &'static str {
        "ou_sde"
    }

    fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    fn dim_y(&self) -> usize {
        2
    }

    fn noise_var(&self) -> Result<Vec<f64>> {
        if let Some(c) = self.cache.cov.get() {
            return Ok(c.clone());
        }
        let c = match &self.covariance {
            CovarianceSpec::Fixed(v) => v.clone(),
            CovarianceSpec::Estimate {
                n_grid,
                seed,
                region,
                fidelity,
            } => estimate_obs_covariance(self, *n_grid, *fidelity, *seed, region.as_ref())?,
        };
        if c.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(format!(
                "OU covariance {c:?} is not positive"
            )));
        }
        Ok(self.cache.cov.get_or_init(|| c).clone())
    }

    fn observe(&self, theta: &[f64], fidelity: Fidelity) -> Result<Vec<f64>> {
        Self::check(theta)?;
        Ok(self
            .bank(Some(fidelity))?
            .statistics(self.y0, theta[0], theta[1])
            .to_vec())
    }

    fn reference_observe(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Self::check(theta)?;
        Ok(self
            .bank(None)?
            .statistics(self.y0, theta[0], theta[1])
            .to_vec())
    }

    /// Monte-Carlo statistics already carry their own error.
    fn simulate(
        &self,
        theta: &[f64],
        fidelity: Fidelity,
        _seed: u64,
        _index: u64,
    ) -> Result<Vec<f64>> {
        self.observe(theta, fidelity)
    }
}
