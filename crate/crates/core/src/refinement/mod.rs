//! High-fidelity refinement around a fixed observation.
//!
//! Samples from the low-fidelity generator define a KDE proposal and a box in
//! which a dense design is simulated at high fidelity. The refined score uses
//! the same mixture form as the low-fidelity estimator, with each atom's log
//! weight corrected by `log p_prior(theta_n) - log p_kde(theta_n)`.

pub mod kde;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    prune_atoms, reverse_ode_solve, AtomScaling, BoxPrior, DiffusionSchedule, LabeledSet,
    LikelihoodWeighting, MixtureScore, PriorDataset, ScheduleCoeffs, PRUNE_LOG_GAP,
};
use crate::error::{Error, Result};
use crate::io;
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

pub use kde::{fit_kde, fit_kde_with, BandwidthRule, KdeModel, LogDensity};

/// Tensor-product grid over the range of the low-fidelity samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedDesign {
    pub bounds: BoxPrior,
    pub grid_counts: Vec<usize>,
    #[serde(skip)]
    pub thetas: Matrix,
}

impl RefinedDesign {
    pub fn len(&self) -> usize {
        self.thetas.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.rows() == 0
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        io::write_blocks(w, &[("theta", &self.thetas)])
    }
}

/// `n` evenly spaced points on `[lo, hi]` including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Full tensor grid, first coordinate varying slowest.
pub fn tensor_grid(bounds: &BoxPrior, counts: &[usize]) -> Result<Matrix> {
    if counts.len() != bounds.dim() {
        return Err(Error::dims(bounds.dim(), counts.len(), "grid counts"));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid("grid counts must be positive"));
    }
    let axes: Vec<Vec<f64>> = (0..bounds.dim())
        .map(|j| linspace(bounds.lo[j], bounds.hi[j], counts[j]))
        .collect();
    let total: usize = counts.iter().product();
    let d = counts.len();
    let mut out = Matrix::zeros(total, d);
    for flat in 0..total {
        let mut rem = flat;
        for j in (0..d).rev() {
            out.set(flat, j, axes[j][rem % counts[j]]);
            rem /= counts[j];
        }
    }
    Ok(out)
}

/// Grid counts giving roughly `spacing[j]` between neighbours on `bounds`.
pub fn counts_for_spacing(bounds: &BoxPrior, spacing: &[f64]) -> Result<Vec<usize>> {
    if spacing.len() != bounds.dim() || spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid(
            "spacing must be positive, one per dimension",
        ));
    }
    Ok((0..bounds.dim())
        .map(|j| ((bounds.hi[j] - bounds.lo[j]) / spacing[j]).round() as usize + 1)
        .collect())
}

/// Bounding box of `low_samples` intersected with the prior box.
pub fn refined_bounds(low_samples: &Matrix, prior: &BoxPrior) -> Result<BoxPrior> {
    if low_samples.rows() < 2 {
        return Err(Error::Design(
            "need at least two low-fidelity samples".into(),
        ));
    }
    if low_samples.cols() != prior.dim() {
        return Err(Error::dims(
            prior.dim(),
            low_samples.cols(),
            "low-fidelity samples",
        ));
    }
    if !low_samples.all_finite() {
        return Err(Error::Design("non-finite low-fidelity samples".into()));
    }
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..low_samples.cols())
        .map(|j| low_samples.column_min_max(j))
        .unzip();
    let range = BoxPrior { lo, hi };
    let clipped = range
        .intersect(prior)
        .ok_or_else(|| Error::Design("sample range does not meet the prior box".into()))?;
    clipped
        .validate()
        .map_err(|_| Error::Design(format!("degenerate refined range {clipped:?}")))?;
    Ok(clipped)
}

pub fn build_refined_design(
    low_samples: &Matrix,
    grid_counts: &[usize],
    prior: &BoxPrior,
) -> Result<RefinedDesign> {
    design_on(refined_bounds(low_samples, prior)?, grid_counts)
}

/// Widens each side of `bounds` by `fraction` of its width, and by at least
/// `min_pad[j]` in coordinate `j`, clipped to the prior box.
pub fn padded_bounds(
    bounds: &BoxPrior,
    fraction: f64,
    min_pad: &[f64],
    prior: &BoxPrior,
) -> Result<BoxPrior> {
    if !(fraction >= 0.0) || !fraction.is_finite() {
        return Err(Error::invalid("padding fraction must be nonnegative"));
    }
    if min_pad.len() != bounds.dim() {
        return Err(Error::dims(bounds.dim(), min_pad.len(), "minimum padding"));
    }
    if min_pad.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("minimum padding must be nonnegative"));
    }
    let w: Vec<f64> = bounds
        .lo
        .iter()
        .zip(&bounds.hi)
        .zip(min_pad)
        .map(|((l, h), m)| (fraction * (h - l)).max(*m))
        .collect();
    let wide = BoxPrior {
        lo: bounds.lo.iter().zip(&w).map(|(l, p)| l - p).collect(),
        hi: bounds.hi.iter().zip(&w).map(|(h, p)| h + p).collect(),
    };
    wide.intersect(prior)
        .ok_or_else(|| Error::Design("padded range does not meet the prior box".into()))
}

/// Tensor grid with `grid_counts` points per dimension over `bounds`.
pub fn design_on(bounds: BoxPrior, grid_counts: &[usize]) -> Result<RefinedDesign> {
    let thetas = tensor_grid(&bounds, grid_counts)?;
    Ok(RefinedDesign {
        bounds,
        grid_counts: grid_counts.to_vec(),
        thetas,
    })
}

/// Which density the refined weights divide out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalCorrection {
    /// `log p_prior - log p_kde`: design points distributed like the KDE.
    Kde,
    /// No correction: design points spread uniformly over their box.
    #[default]
    UniformDesign,
}

/// Fixed per-atom log weights: likelihood plus `log p_prior - log p_proposal`.
pub fn refined_log_weights<P: LogDensity + ?Sized>(
    y: &[f64],
    refine_data: &PriorDataset,
    proposal: &P,
    prior: &BoxPrior,
    weighting: LikelihoodWeighting,
) -> Result<Vec<f64>> {
    let lik = weighting.log_terms(y, refine_data)?;
    refine_data
        .thetas
        .iter_rows()
        .zip(lik)
        .enumerate()
        .map(|(n, (th, l))| {
            let lp = prior.log_density(th);
            if !lp.is_finite() {
                return Err(Error::invalid(format!(
                    "refined atom {n} lies outside the prior"
                )));
            }
            let lq = proposal.log_density(th);
            if lq.is_nan() || lq == f64::NEG_INFINITY {
                return Err(Error::invalid(format!(
                    "proposal density vanishes at refined atom {n}"
                )));
            }
            Ok(l + lp - lq)
        })
        .collect()
}

/// Mixture score estimator over the refined atoms.
pub fn refined_estimator<'a, P: LogDensity + ?Sized>(
    y: &[f64],
    refine_data: &'a PriorDataset,
    proposal: &P,
    prior: &BoxPrior,
    weighting: LikelihoodWeighting,
) -> Result<MixtureScore<'a>> {
    let lw = refined_log_weights(y, refine_data, proposal, prior, weighting)?;
    MixtureScore::with_log_weights(&refine_data.thetas, lw)
}

#[allow(clippy::too_many_arguments)]
pub fn refined_weights<P: LogDensity + ?Sized>(
    z_tau: &[f64],
    tau: f64,
    y: &[f64],
    refine_data: &PriorDataset,
    proposal: &P,
    prior: &BoxPrior,
    sched: &DiffusionSchedule,
    weighting: LikelihoodWeighting,
) -> Result<Vec<f64>> {
    let c = sched.coeffs(tau)?;
    check_z(z_tau, refine_data)?;
    let est = refined_estimator(y, refine_data, proposal, prior, weighting)?;
    Ok(est.weights(z_tau, &c))
}

#[allow(clippy::too_many_arguments)]
pub fn refined_score<P: LogDensity + ?Sized>(
    z_tau: &[f64],
    tau: f64,
    y: &[f64],
    refine_data: &PriorDataset,
    proposal: &P,
    prior: &BoxPrior,
    sched: &DiffusionSchedule,
    weighting: LikelihoodWeighting,
) -> Result<Vec<f64>> {
    let c: ScheduleCoeffs = sched.coeffs(tau)?;
    check_z(z_tau, refine_data)?;
    let est = refined_estimator(y, refine_data, proposal, prior, weighting)?;
    let mut out = vec![0.0; z_tau.len()];
    est.score_at(z_tau, &c, &mut out);
    Ok(out)
}

fn check_z(z: &[f64], data: &PriorDataset) -> Result<()> {
    if z.len() != data.dim_theta() {
        return Err(Error::dims(data.dim_theta(), z.len(), "diffused state"));
    }
    Ok(())
}

/// Unconditional labeled pairs `(z_n, theta_n)` at the fixed observation `y`.
#[allow(clippy::too_many_arguments)]
pub fn generate_refined_labels<P: LogDensity + Sync + ?Sized>(
    refine_data: &PriorDataset,
    y: &[f64],
    count: usize,
    sched: &DiffusionSchedule,
    proposal: &P,
    prior: &BoxPrior,
    weighting: LikelihoodWeighting,
    seed: u64,
) -> Result<LabeledSet> {
    if count == 0 {
        return Err(Error::invalid("refined label count must be positive"));
    }
    let lw = refined_log_weights(y, refine_data, proposal, prior, weighting)?;
    let scaling = AtomScaling::for_schedule(&refine_data.thetas, sched);
    let atoms = scaling.forward(&refine_data.thetas);
    let (kept, lw) = prune_atoms(&atoms, &lw, PRUNE_LOG_GAP);
    let est = MixtureScore::with_log_weights(&kept, lw)?;
    let d = refine_data.dim_theta();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|n| {
            let z = rng::normal_vec(seed, Purpose::RefinedLatent, n as u64, d);
            reverse_ode_solve(&z, &est, sched)
                .map(|mut t| {
                    scaling.inverse_in_place(&mut t);
                    (z, t)
                })
                .map_err(|e| Error::LabelFailed {
                    index: n,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let zs: Vec<&Vec<f64>> = pairs.iter().map(|p| &p.0).collect();
    let ts: Vec<&Vec<f64>> = pairs.iter().map(|p| &p.1).collect();
    LabeledSet::new(None, Matrix::from_rows(&zs)?, Matrix::from_rows(&ts)?)
}
