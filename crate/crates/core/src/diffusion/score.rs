//! Training-free Monte-Carlo score estimation.
//!
//! Given atoms `theta_n` and fixed per-atom log weights `l_n`, the diffused
//! density at pseudo-time `tau` is the mixture `sum_n e^{l_n} N(alpha theta_n, beta^2 I)`.
//! Its score is `-(z - alpha * mean_w(theta)) / beta^2`, where the weights are
//! the softmax of `l_n - |z - alpha theta_n|^2 / (2 beta^2)`. The observation
//! likelihood (and, for refinement, the prior/proposal ratio) enters only
//! through `l_n`.

use serde::{Deserialize, Serialize};

use super::data::PriorDataset;
use super::schedule::{DiffusionSchedule, ScheduleCoeffs};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// How the observation mismatch enters the log weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodWeighting {
    /// `true`: `-1/2 (y - y_n)^T Sigma^-1 (y - y_n)` (the Gaussian log-likelihood).
    /// `false`: the same quadratic form without the 1/2.
    pub half_factor: bool,
}

impl Default for LikelihoodWeighting {
    fn default() -> Self {
        Self { half_factor: true }
    }
}

impl LikelihoodWeighting {
    pub fn log_term(&self, y: &[f64], y_n: &[f64], sigma_diag: &[f64]) -> f64 {
        let q: f64 = y
            .iter()
            .zip(y_n)
            .zip(sigma_diag)
            .map(|((a, b), s)| (a - b) * (a - b) / s)
            .sum();
        if self.half_factor {
            -0.5 * q
        } else {
            -q
        }
    }

    /// Log-likelihood term of every dataset row against `y`.
    pub fn log_terms(&self, y: &[f64], data: &PriorDataset) -> Result<Vec<f64>> {
        if y.len() != data.dim_obs() {
            return Err(Error::dims(data.dim_obs(), y.len(), "observation"));
        }
        Ok(data
            .obs
            .iter_rows()
            .map(|yn| self.log_term(y, yn, &data.sigma_diag))
            .collect())
    }
}

/// A vector field usable as the score in the probability-flow ODE.
pub trait ScoreField {
    fn dim(&self) -> usize;
    fn score_into(&self, z: &[f64], tau: f64, out: &mut [f64]);
}

/// Closure-backed score with an explicit dimension.
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64])> ScoreField for FnScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn score_into(&self, z: &[f64], tau: f64, out: &mut [f64]) {
        (self.f)(z, tau, out)
    }
}

/// Score of a weighted Gaussian mixture centred on scaled atoms.
#[derive(Clone, Debug)]
pub struct MixtureScore<'a> {
    atoms: &'a Matrix,
    log_base: Vec<f64>,
}

impl<'a> MixtureScore<'a> {
    /// Equal weights: the marginal (unconditional) estimator.
    pub fn unconditional(atoms: &'a Matrix) -> Result<Self> {
        Self::with_log_weights(atoms, vec![0.0; atoms.rows()])
    }

    pub fn with_log_weights(atoms: &'a Matrix, log_base: Vec<f64>) -> Result<Self> {
        if atoms.rows() == 0 {
            return Err(Error::invalid("score estimator needs at least one atom"));
        }
        if log_base.len() != atoms.rows() {
            return Err(Error::dims(
                atoms.rows(),
                log_base.len(),
                "atom log weights",
            ));
        }
        if log_base.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::invalid("atom log weights must be finite or -inf"));
        }
        if log_base.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(Error::invalid("all atoms carry zero weight"));
        }
        Ok(Self { atoms, log_base })
    }

    /// Conditional estimator at observation `y`; `None` gives the marginal.
    pub fn conditional(
        data: &'a PriorDataset,
        y: Option<&[f64]>,
        weighting: LikelihoodWeighting,
    ) -> Result<Self> {
        match y {
            Some(y) => Self::with_log_weights(&data.thetas, weighting.log_terms(y, data)?),
            None => Self::unconditional(&data.thetas),
        }
    }

    pub fn atoms(&self) -> &Matrix {
        self.atoms
    }

    pub fn log_base(&self) -> &[f64] {
        &self.log_base
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.atoms.cols() {
            return Err(Error::dims(self.atoms.cols(), z.len(), "diffused state"));
        }
        Ok(())
    }

    /// Unnormalized log weights (softmax logits).
    pub fn logits(&self, z: &[f64], c: &ScheduleCoeffs) -> Vec<f64> {
        let inv = 0.5 / c.beta_sq;
        self.atoms
            .iter_rows()
            .zip(&self.log_base)
            .map(|(th, &l)| {
                let d2: f64 = z
                    .iter()
                    .zip(th)
                    .map(|(zj, tj)| (zj - c.alpha * tj).powi(2))
                    .sum();
                l - d2 * inv
            })
            .collect()
    }

    /// Normalized mixture weights via log-sum-exp.
    pub fn weights(&self, z: &[f64], c: &ScheduleCoeffs) -> Vec<f64> {
        let mut w = self.logits(z, c);
        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in w.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in w.iter_mut() {
            *v /= s;
        }
        w
    }

    /// Weighted atom mean `sum_n w_n theta_n`, accumulated in a single pass
    /// with a running maximum so no weight buffer is needed.
    pub fn weighted_mean_into(&self, z: &[f64], c: &ScheduleCoeffs, out: &mut [f64]) {
        let inv = 0.5 / c.beta_sq;
        let mut max = f64::NEG_INFINITY;
        let mut total = 0.0;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (th, &l) in self.atoms.iter_rows().zip(&self.log_base) {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let mut d2 = 0.0;
            for (zj, tj) in z.iter().zip(th) {
                let r = zj - c.alpha * tj;
                d2 += r * r;
            }
            let logit = l - d2 * inv;
            if logit > max {
                let rescale = (max - logit).exp();
                total = total * rescale + 1.0;
                for (o, t) in out.iter_mut().zip(th) {
                    *o = *o * rescale + t;
                }
                max = logit;
            } else {
                let w = (logit - max).exp();
                total += w;
                for (o, t) in out.iter_mut().zip(th) {
                    *o += w * t;
                }
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Score at `(z, tau)` without clamp validation.
    pub fn score_at(&self, z: &[f64], c: &ScheduleCoeffs, out: &mut [f64]) {
        self.weighted_mean_into(z, c, out);
        for (o, zj) in out.iter_mut().zip(z) {
            *o = -(zj - c.alpha * *o) / c.beta_sq;
        }
    }
}

impl ScoreField for MixtureScore<'_> {
    fn dim(&self) -> usize {
        self.atoms.cols()
    }

    fn score_into(&self, z: &[f64], tau: f64, out: &mut [f64]) {
        self.score_at(z, &ScheduleCoeffs::at(tau), out)
    }
}

/// Log-weight gap past which an atom's share of the mixture is below roundoff.
pub const PRUNE_LOG_GAP: f64 = 50.0;

/// Keeps the atoms whose fixed log weight is within `gap` of the largest.
pub fn prune_atoms(atoms: &Matrix, log_base: &[f64], gap: f64) -> (Matrix, Vec<f64>) {
    let max = log_base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..log_base.len())
        .filter(|&n| log_base[n] >= max - gap)
        .collect();
    let lw = keep.iter().map(|&n| log_base[n]).collect();
    (atoms.select_rows(&keep), lw)
}

/// Monte-Carlo weights of every prior sample at `(z_tau, tau)`, optionally
/// conditioned on `y`.
pub fn mc_weights(
    z_tau: &[f64],
    tau: f64,
    y: Option<&[f64]>,
    data: &PriorDataset,
    sched: &DiffusionSchedule,
    weighting: LikelihoodWeighting,
) -> Result<Vec<f64>> {
    let c = sched.coeffs(tau)?;
    let est = MixtureScore::conditional(data, y, weighting)?;
    est.check_z(z_tau)?;
    Ok(est.weights(z_tau, &c))
}

/// Monte-Carlo score estimate at `(z_tau, tau)`, optionally conditioned on `y`.
pub fn mc_score(
    z_tau: &[f64],
    tau: f64,
    y: Option<&[f64]>,
    data: &PriorDataset,
    sched: &DiffusionSchedule,
    weighting: LikelihoodWeighting,
) -> Result<Vec<f64>> {
    let c = sched.coeffs(tau)?;
    let est = MixtureScore::conditional(data, y, weighting)?;
    est.check_z(z_tau)?;
    let mut out = vec![0.0; z_tau.len()];
    est.score_at(z_tau, &c, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::BoxPrior;
    use proptest::prelude::*;

    #[test]
    fn pruning_keeps_atoms_within_the_gap() {
        let atoms = Matrix::column_vector(&[0.0, 1.0, 2.0, 3.0]);
        let (kept, lw) = prune_atoms(&atoms, &[-1.0, -60.0, -40.0, f64::NEG_INFINITY], 50.0);
        assert_eq!(kept.as_slice(), &[0.0, 2.0]);
        assert_eq!(lw, vec![-1.0, -40.0]);
        let full = MixtureScore::with_log_weights(&atoms, vec![0.0, -60.0, -1.0, -70.0]).unwrap();
        let (k, l) = prune_atoms(&atoms, full.log_base(), PRUNE_LOG_GAP);
        let pruned = MixtureScore::with_log_weights(&k, l).unwrap();
        let c = ScheduleCoeffs::at(0.5);
        let (mut a, mut b) = ([0.0], [0.0]);
        full.score_at(&[0.3], &c, &mut a);
        pruned.score_at(&[0.3], &c, &mut b);
        assert!((a[0] - b[0]).abs() < 1e-15 * a[0].abs().max(1.0));
    }

    fn dataset(thetas: &[f64], ys: &[f64]) -> PriorDataset {
        PriorDataset::new(
            Matrix::column_vector(thetas),
            Matrix::column_vector(ys),
            vec![0.1],
            BoxPrior::new(vec![-20.0], vec![20.0]).unwrap(),
        )
        .unwrap()
    }

    const W: LikelihoodWeighting = LikelihoodWeighting { half_factor: false };

    #[test]
    fn single_atom_weight_is_one() {
        let ds = dataset(&[2.0], &[4.0]);
        let s = DiffusionSchedule::default();
        let w = mc_weights(&[0.3], 0.4, Some(&[1.0]), &ds, &s, W).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn identical_atoms_share_weight_equally() {
        let ds = dataset(&[1.5, 1.5, 1.5], &[2.0, 2.0, 2.0]);
        let w = mc_weights(
            &[0.0],
            0.5,
            Some(&[1.0]),
            &ds,
            &DiffusionSchedule::default(),
            W,
        )
        .unwrap();
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_atom_weights_match_hand_evaluation() {
        // exponents: 0 and -(0 - 0.5*10)^2 / (2*0.5) = -25
        let ds = dataset(&[0.0, 10.0], &[0.0, 0.0]);
        let w = mc_weights(&[0.0], 0.5, None, &ds, &DiffusionSchedule::default(), W).unwrap();
        let e = (-25.0f64).exp();
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((w[1] - e / (1.0 + e)).abs() < 1e-22);
    }

    #[test]
    fn single_atom_score_closed_form() {
        let ds = dataset(&[2.0], &[4.0]);
        let s = mc_score(&[0.0], 0.5, None, &ds, &DiffusionSchedule::default(), W).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-14);
        let s = mc_score(&[1.0], 0.5, None, &ds, &DiffusionSchedule::default(), W).unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn extreme_exponents_stay_finite() {
        // likelihood terms near -1e6 and the spatial term near -1e6 as well
        let ds = PriorDataset::new(
            Matrix::column_vector(&[-1000.0, 0.0, 1000.0]),
            Matrix::column_vector(&[0.0, 300.0, -300.0]),
            vec![0.1],
            BoxPrior::new(vec![-1000.0], vec![1000.0]).unwrap(),
        )
        .unwrap();
        let sched = DiffusionSchedule::default();
        let w = mc_weights(&[1e3], 1e-3, Some(&[-100.0]), &ds, &sched, W).unwrap();
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let s = mc_score(&[1e3], 1e-3, Some(&[-100.0]), &ds, &sched, W).unwrap();
        assert!(s[0].is_finite());
    }

    #[test]
    fn conditioning_dimension_is_checked() {
        let ds = dataset(&[1.0], &[1.0]);
        let s = DiffusionSchedule::default();
        assert!(mc_score(&[0.0], 0.5, Some(&[1.0, 2.0]), &ds, &s, W).is_err());
        assert!(mc_score(&[0.0, 1.0], 0.5, None, &ds, &s, W).is_err());
        assert!(mc_score(&[0.0], 0.9999, None, &ds, &s, W).is_err());
    }

    #[test]
    fn half_factor_switch() {
        let a = LikelihoodWeighting { half_factor: true }.log_term(&[1.0], &[0.0], &[0.5]);
        let b = LikelihoodWeighting { half_factor: false }.log_term(&[1.0], &[0.0], &[0.5]);
        assert_eq!((a, b), (-1.0, -2.0));
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex(
            thetas in proptest::collection::vec(-10.0f64..10.0, 1..20),
            z in -5.0f64..5.0,
            tau in 1e-3f64..0.999,
            y in -2.0f64..100.0,
        ) {
            let ys: Vec<f64> = thetas.iter().map(|t| t * t).collect();
            let ds = dataset(&thetas, &ys);
            let w = mc_weights(&[z], tau, Some(&[y]), &ds, &DiffusionSchedule::default(), W).unwrap();
            prop_assert!(w.iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn streaming_mean_matches_explicit_weights(
            thetas in proptest::collection::vec(-10.0f64..10.0, 1..30),
            z in -5.0f64..5.0,
            tau in 1e-3f64..0.999,
        ) {
            let atoms = Matrix::column_vector(&thetas);
            let est = MixtureScore::unconditional(&atoms).unwrap();
            let c = ScheduleCoeffs::at(tau);
            let w = est.weights(&[z], &c);
            let explicit: f64 = w.iter().zip(&thetas).map(|(a, b)| a * b).sum();
            let mut streamed = [0.0];
            est.weighted_mean_into(&[z], &c, &mut streamed);
            prop_assert!((explicit - streamed[0]).abs() <= 1e-12 * (1.0 + explicit.abs()));
        }
    }
}
