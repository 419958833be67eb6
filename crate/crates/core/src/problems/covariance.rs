use rand::Rng;
use rayon::prelude::*;

use super::{Fidelity, ForwardProblem};
use crate::diffusion::BoxPrior;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Diagonal observation covariance from the mean squared deviation between the
/// `fidelity` observation and the reference observation at `n_grid` parameter
/// draws, uniform over `region` (the prior box when `None`).
pub fn estimate_obs_covariance(
    problem: &dyn ForwardProblem,
    n_grid: usize,
    fidelity: Fidelity,
    seed: u64,
    region: Option<&BoxPrior>,
) -> Result<Vec<f64>> {
    if n_grid == 0 {
        return Err(Error::invalid(
            "covariance estimation needs at least one point",
        ));
    }
    let region = region.unwrap_or(problem.prior());
    if region.dim() != problem.dim_theta() {
        return Err(Error::dims(
            problem.dim_theta(),
            region.dim(),
            "estimation region",
        ));
    }
    let devs: Vec<Vec<f64>> = (0..n_grid)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::stream(seed, Purpose::CovarianceDesign, i as u64);
            let theta: Vec<f64> = region
                .lo
                .iter()
                .zip(&region.hi)
                .map(|(lo, hi)| g.gen_range(*lo..=*hi))
                .collect();
            let y = problem.observe(&theta, fidelity)?;
            let r = problem.reference_observe(&theta)?;
            Ok(y.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).collect())
        })
        .collect::<Result<_>>()?;
    let q = problem.dim_y();
    Ok((0..q)
        .map(|k| devs.iter().map(|d| d[k]).sum::<f64>() / n_grid as f64)
        .collect())
}
