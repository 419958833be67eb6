//! Benchmark forward models.

pub mod burgers;
pub mod covariance;
pub mod lorenz;
pub mod ou;
pub mod quadratic;
pub mod quadrature;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{BoxPrior, PriorDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::refinement::{counts_for_spacing, tensor_grid};
use crate::rng::{self, Purpose};

pub use burgers::{
    burgers_exact, burgers_reference_loglike, burgers_solve, BurgersExact, BurgersProblem,
};
pub use covariance::estimate_obs_covariance;
pub use lorenz::{lorenz_observe, Lorenz63Problem};
pub use ou::{
    ou_exact_moments, ou_statistics, ou_statistics_em, CovarianceSpec, OuPathBank, OuSdeProblem,
};
pub use quadratic::{quadratic_posterior_pdf, QuadraticPosterior, QuadraticProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Low,
    High,
}

/// A parameter-to-observation map with Gaussian observation noise.
pub trait ForwardProblem: Send + Sync {
    fn name(&self) -> &'static str;

    fn prior(&self) -> &BoxPrior;

    fn dim_theta(&self) -> usize {
        self.prior().dim()
    }

    fn dim_y(&self) -> usize;

    /// Diagonal of the observation-noise covariance.
    fn noise_var(&self) -> Result<Vec<f64>>;

    /// Noise-free observation operator at the requested resolution.
    fn observe(&self, theta: &[f64], fidelity: Fidelity) -> Result<Vec<f64>>;

    /// Most accurate available observation, used by oracles.
    fn reference_observe(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.observe(theta, Fidelity::High)
    }

    /// `observe` plus Gaussian noise drawn from stream `(seed, index)`.
    fn simulate(
        &self,
        theta: &[f64],
        fidelity: Fidelity,
        seed: u64,
        index: u64,
    ) -> Result<Vec<f64>> {
        let mut y = self.observe(theta, fidelity)?;
        let xi = rng::normal_vec(seed, Purpose::ObservationNoise, index, y.len());
        for ((v, e), s2) in y.iter_mut().zip(xi).zip(self.noise_var()?) {
            *v += s2.sqrt() * e;
        }
        Ok(y)
    }

    /// Gaussian log-likelihood of `y` around `reference_observe(theta)`, up to a constant.
    fn reference_log_likelihood(&self, theta: &[f64], y: &[f64]) -> Result<f64> {
        let h = self.reference_observe(theta)?;
        if h.len() != y.len() {
            return Err(Error::dims(h.len(), y.len(), "observation"));
        }
        Ok(gaussian_log_kernel(y, &h, &self.noise_var()?))
    }
}

/// `-1/2 sum (y - h)^2 / var`.
pub fn gaussian_log_kernel(y: &[f64], h: &[f64], var: &[f64]) -> f64 {
    -0.5 * y
        .iter()
        .zip(h)
        .zip(var)
        .map(|((a, b), v)| (a - b) * (a - b) / v)
        .sum::<f64>()
}

/// Problem selected by name in an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ProblemConfig {
    Quadratic(QuadraticProblem),
    Burgers(BurgersProblem),
    Lorenz63(Lorenz63Problem),
    OuSde(OuSdeProblem),
}

impl ProblemConfig {
    pub fn forward(&self) -> &dyn ForwardProblem {
        match self {
            ProblemConfig::Quadratic(p) => p,
            ProblemConfig::Burgers(p) => p,
            ProblemConfig::Lorenz63(p) => p,
            ProblemConfig::OuSde(p) => p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProblemConfig::Quadratic(p) => p.validate(),
            ProblemConfig::Burgers(p) => p.validate(),
            ProblemConfig::Lorenz63(p) => p.validate(),
            ProblemConfig::OuSde(p) => p.validate(),
        }
    }
}

/// Uniform tensor grid over a box, by point counts or by spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    Counts(Vec<usize>),
    Spacing(Vec<f64>),
}

impl GridSpec {
    pub fn counts(&self, domain: &BoxPrior) -> Result<Vec<usize>> {
        let c = match self {
            GridSpec::Counts(c) => c.clone(),
            GridSpec::Spacing(s) => counts_for_spacing(domain, s)?,
        };
        if c.len() != domain.dim() {
            return Err(Error::dims(domain.dim(), c.len(), "grid counts"));
        }
        Ok(c)
    }

    pub fn points(&self, domain: &BoxPrior) -> Result<Matrix> {
        tensor_grid(domain, &self.counts(domain)?)
    }
}

/// Runs the simulator at every row of `thetas`.
///
/// `noise_seed = Some(s)` adds observation noise from stream `(s, row)`;
/// `None` stores noise-free outputs.
pub fn simulate_rows(
    problem: &dyn ForwardProblem,
    thetas: &Matrix,
    fidelity: Fidelity,
    noise_seed: Option<u64>,
) -> Result<Matrix> {
    if thetas.cols() != problem.dim_theta() {
        return Err(Error::dims(
            problem.dim_theta(),
            thetas.cols(),
            "parameter columns",
        ));
    }
    let rows: Vec<Vec<f64>> = (0..thetas.rows())
        .into_par_iter()
        .map(|i| {
            let th = thetas.row(i);
            let y = match noise_seed {
                Some(s) => problem.simulate(th, fidelity, s, i as u64),
                None => problem.observe(th, fidelity),
            };
            y.and_then(|y| {
                if y.iter().all(|v| v.is_finite()) {
                    Ok(y)
                } else {
                    Err(Error::Unstable("non-finite observation".into()))
                }
            })
            .map_err(|e| Error::SimulationFailed {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, problem.dim_y()));
    }
    Matrix::from_rows(&rows)
}

/// Simulates `thetas` and packages them with the problem's noise model.
pub fn build_dataset(
    problem: &dyn ForwardProblem,
    thetas: Matrix,
    fidelity: Fidelity,
    noise_seed: Option<u64>,
) -> Result<PriorDataset> {
    let obs = simulate_rows(problem, &thetas, fidelity, noise_seed)?;
    PriorDataset::new(thetas, obs, problem.noise_var()?, problem.prior().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_specs_reproduce_published_sizes() {
        let q = QuadraticProblem::default();
        assert_eq!(
            GridSpec::Spacing(vec![0.2])
                .points(q.prior())
                .unwrap()
                .rows(),
            101
        );
        let b = BurgersProblem::default();
        assert_eq!(
            GridSpec::Spacing(vec![9e-4])
                .points(b.prior())
                .unwrap()
                .rows(),
            101
        );
        let l = Lorenz63Problem::default();
        assert_eq!(
            GridSpec::Spacing(vec![0.125, 0.125])
                .counts(l.prior())
                .unwrap(),
            vec![81, 81]
        );
        assert_eq!(
            GridSpec::Counts(vec![81, 81])
                .points(l.prior())
                .unwrap()
                .rows(),
            6561
        );
        let o = OuSdeProblem::default();
        assert_eq!(
            GridSpec::Spacing(vec![0.5, 0.5])
                .points(o.prior())
                .unwrap()
                .rows(),
            1681
        );
    }

    #[test]
    fn simulate_adds_reproducible_noise() {
        let q = QuadraticProblem::default();
        let a = q.simulate(&[1.5], Fidelity::Low, 3, 7).unwrap();
        let b = q.simulate(&[1.5], Fidelity::Low, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, q.simulate(&[1.5], Fidelity::Low, 3, 8).unwrap());
        let n = 4000;
        let mean_sq: f64 = (0..n)
            .map(|i| (q.simulate(&[1.5], Fidelity::Low, 1, i).unwrap()[0] - 2.25).powi(2))
            .sum::<f64>()
            / n as f64;
        assert!((mean_sq - 0.1).abs() < 0.01, "{mean_sq}");
    }

    #[test]
    fn dataset_rows_follow_thetas() {
        let q = QuadraticProblem::default();
        let th = GridSpec::Spacing(vec![0.2]).points(q.prior()).unwrap();
        let ds = build_dataset(&q, th, Fidelity::Low, None).unwrap();
        for (t, y) in ds.thetas.iter_rows().zip(ds.obs.iter_rows()) {
            assert_eq!(y[0], t[0] * t[0]);
        }
    }

    #[test]
    fn simulation_failures_name_the_row() {
        let b = BurgersProblem::default();
        let th = Matrix::column_vector(&[0.05, 5.0]);
        match simulate_rows(&b, &th, Fidelity::Low, None) {
            Err(Error::SimulationFailed { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_names() {
        let j = serde_json::to_value(ProblemConfig::OuSde(OuSdeProblem::default())).unwrap();
        assert_eq!(j["name"], "ou_sde");
        let j = serde_json::to_value(ProblemConfig::Lorenz63(Lorenz63Problem::default())).unwrap();
        assert_eq!(j["name"], "lorenz63");
        let p: ProblemConfig = serde_json::from_str(r#"{"name":"quadratic"}"#).unwrap();
        assert_eq!(p, ProblemConfig::Quadratic(QuadraticProblem::default()));
        assert!(serde_json::from_str::<ProblemConfig>(r#"{"name":"heat"}"#).is_err());
    }
}
