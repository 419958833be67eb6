//! Probability-flow reverse ODE and labeled-data generation.

use rayon::prelude::*;

use super::data::{LabeledSet, PriorDataset};
use super::schedule::{DiffusionSchedule, ScheduleCoeffs};
use super::score::{prune_atoms, LikelihoodWeighting, MixtureScore, ScoreField, PRUNE_LOG_GAP};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

/// Integrates `dz/dtau = b(tau) z - 1/2 sigma^2(tau) S(z, tau)` with fixed-step
/// RK4 from `tau = 1 - eps_hi` down to `tau = eps_lo`.
pub fn reverse_ode_solve<S: ScoreField + ?Sized>(
    z1: &[f64],
    score: &S,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    sched.validate()?;
    let d = z1.len();
    if d != score.dim() {
        return Err(Error::dims(score.dim(), d, "reverse ODE initial state"));
    }
    let t0 = sched.tau_start();
    let h = (sched.tau_end() - t0) / sched.n_steps as f64;

    let mut z = z1.to_vec();
    let mut stage = vec![0.0; d];
    let mut s_buf = vec![0.0; d];
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];

    let field = |z: &[f64], tau: f64, s_buf: &mut [f64], out: &mut [f64]| {
        let c = ScheduleCoeffs::at(tau);
        score.score_into(z, tau, s_buf);
        for j in 0..z.len() {
            out[j] = c.drift * z[j] - 0.5 * c.diffusion_sq * s_buf[j];
        }
    };

    for step in 0..sched.n_steps {
        let tau = t0 + step as f64 * h;
        field(&z, tau, &mut s_buf, &mut k[0]);
        for j in 0..d {
            stage[j] = z[j] + 0.5 * h * k[0][j];
        }
        field(&stage, tau + 0.5 * h, &mut s_buf, &mut k[1]);
        for j in 0..d {
            stage[j] = z[j] + 0.5 * h * k[1][j];
        }
        field(&stage, tau + 0.5 * h, &mut s_buf, &mut k[2]);
        for j in 0..d {
            stage[j] = z[j] + h * k[2][j];
        }
        field(&stage, tau + h, &mut s_buf, &mut k[3]);
        for j in 0..d {
            z[j] += h / 6.0 * (k[0][j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { step });
        }
    }

    if sched.denoise_final {
        let tau = sched.tau_end();
        let c = ScheduleCoeffs::at(tau);
        score.score_into(&z, tau, &mut s_buf);
        for j in 0..d {
            z[j] = (z[j] + c.beta_sq * s_buf[j]) / c.alpha;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged {
                step: sched.n_steps,
            });
        }
    }
    Ok(z)
}

/// Per-coordinate affine map taking the atoms' bounding box onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomScaling {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl AtomScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            half_width: vec![1.0; dim],
        }
    }

    /// Fitted to `atoms`; a coordinate with zero extent keeps unit width.
    pub fn fit(atoms: &Matrix) -> Self {
        let (center, half_width) = (0..atoms.cols())
            .map(|j| {
                let (lo, hi) = atoms.column_min_max(j);
                let h = 0.5 * (hi - lo);
                (0.5 * (lo + hi), if h > 0.0 { h } else { 1.0 })
            })
            .unzip();
        Self { center, half_width }
    }

    /// `fit` when the schedule asks for normalization, identity otherwise.
    pub fn for_schedule(atoms: &Matrix, sched: &DiffusionSchedule) -> Self {
        if sched.normalize_atoms {
            Self::fit(atoms)
        } else {
            Self::identity(atoms.cols())
        }
    }

    pub fn forward(&self, atoms: &Matrix) -> Matrix {
        let mut out = atoms.clone();
        for i in 0..out.rows() {
            for (v, (c, h)) in out
                .row_mut(i)
                .iter_mut()
                .zip(self.center.iter().zip(&self.half_width))
            {
                *v = (*v - c) / h;
            }
        }
        out
    }

    pub fn inverse_in_place(&self, x: &mut [f64]) {
        for (v, (c, h)) in x.iter_mut().zip(self.center.iter().zip(&self.half_width)) {
            *v = c + h * *v;
        }
    }
}

/// One approximate draw from the observation marginal, using stream `index`.
pub fn sample_marginal_one(
    data: &PriorDataset,
    sched: &DiffusionSchedule,
    seed: u64,
    index: usize,
) -> Result<Vec<f64>> {
    let est = MixtureScore::unconditional(&data.obs)?;
    let z1 = rng::normal_vec(seed, Purpose::MarginalLatent, index as u64, data.dim_obs());
    reverse_ode_solve(&z1, &est, sched)
}

/// `count` approximate draws from the marginal of the observations in `data`,
/// via the unconditional training-free diffusion over `{y_n}`.
pub fn sample_marginal_y(
    data: &PriorDataset,
    count: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| {
            sample_marginal_one(data, sched, seed, i).map_err(|e| Error::LabelFailed {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, data.dim_obs()));
    }
    Matrix::from_rows(&rows)
}

/// Builds the conditional labeled set `{(y_m, z_m, theta_m)}`: `y_m` from the
/// marginal diffusion, `z_m ~ N(0, I)`, `theta_m` the reverse-ODE image of `z_m`
/// under the score conditioned on `y_m`.
pub fn generate_labels(
    data: &PriorDataset,
    count: usize,
    sched: &DiffusionSchedule,
    weighting: LikelihoodWeighting,
    seed: u64,
) -> Result<LabeledSet> {
    if count == 0 {
        return Err(Error::invalid("label count must be positive"));
    }
    let d = data.dim_theta();
    let scaling = AtomScaling::for_schedule(&data.thetas, sched);
    let atoms = scaling.forward(&data.thetas);
    let triples: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|m| {
            let one = || -> Result<_> {
                let y = sample_marginal_one(data, sched, seed, m)?;
                let z = rng::normal_vec(seed, Purpose::LabelLatent, m as u64, d);
                let (kept, lw) =
                    prune_atoms(&atoms, &weighting.log_terms(&y, data)?, PRUNE_LOG_GAP);
                let est = MixtureScore::with_log_weights(&kept, lw)?;
                let mut theta = reverse_ode_solve(&z, &est, sched)?;
                scaling.inverse_in_place(&mut theta);
                Ok((y, z, theta))
            };
            one().map_err(|e| Error::LabelFailed {
                index: m,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let ys: Vec<&Vec<f64>> = triples.iter().map(|t| &t.0).collect();
    let zs: Vec<&Vec<f64>> = triples.iter().map(|t| &t.1).collect();
    let ts: Vec<&Vec<f64>> = triples.iter().map(|t| &t.2).collect();
    LabeledSet::new(
        Some(Matrix::from_rows(&ys)?),
        Matrix::from_rows(&zs)?,
        Matrix::from_rows(&ts)?,
    )
}
