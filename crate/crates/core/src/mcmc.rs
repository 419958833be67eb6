//! Affine-invariant ensemble sampler with the stretch move.

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::BoxPrior;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

/// Steps with no accepted move before a run is flagged as stuck.
pub const STAGNATION_WINDOW: usize = 1000;

/// Rejection-sampling attempts per walker during initialization.
const INIT_ATTEMPTS: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub walkers: usize,
    pub burn_in: usize,
    pub n_samples: usize,
    /// Stretch scale `a > 1`.
    pub stretch: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            walkers: 10,
            burn_in: 20_000,
            n_samples: 10_000,
            stretch: 2.0,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walkers < 2 {
            return Err(Error::invalid("ensemble needs at least 2 walkers"));
        }
        if !(self.stretch > 1.0) || !self.stretch.is_finite() {
            return Err(Error::invalid("stretch scale must exceed 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub walkers: Matrix,
    pub log_probs: Vec<f64>,
    pub step_count: usize,
    pub accept_count: usize,
    /// Proposals rejected because the log-posterior returned NaN.
    pub nan_count: usize,
}

impl EnsembleState {
    pub fn new<F>(walkers: Matrix, log_post: &F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        if walkers.rows() < 2 {
            return Err(Error::invalid("ensemble needs at least 2 walkers"));
        }
        let log_probs: Vec<f64> = (0..walkers.rows())
            .into_par_iter()
            .map(|j| log_post(walkers.row(j)))
            .collect();
        if let Some(j) = log_probs.iter().position(|l| !l.is_finite()) {
            return Err(Error::invalid(format!(
                "walker {j} starts at non-finite log-posterior"
            )));
        }
        Ok(Self {
            walkers,
            log_probs,
            step_count: 0,
            accept_count: 0,
            nan_count: 0,
        })
    }

    pub fn n_walkers(&self) -> usize {
        self.walkers.rows()
    }

    pub fn dim(&self) -> usize {
        self.walkers.cols()
    }

    /// Accepted moves per walker update so far.
    pub fn acceptance_rate(&self) -> f64 {
        let n = self.step_count * self.n_walkers();
        if n == 0 {
            0.0
        } else {
            self.accept_count as f64 / n as f64
        }
    }
}

/// Draws `Z` from `g(z) ∝ 1/sqrt(z)` on `[1/a, a]` by inversion.
pub fn sample_stretch<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    let u: f64 = rng.gen();
    let s = (a - 1.0) * u + 1.0;
    s * s / a
}

struct Move {
    theta: Vec<f64>,
    log_prob: f64,
    accepted: bool,
    nan: bool,
}

/// One sweep: each half of the ensemble moves against the other, in turn.
pub fn stretch_step<F>(state: &mut EnsembleState, log_post: &F, a: f64, seed: u64) -> Result<()>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(a > 1.0) || !a.is_finite() {
        return Err(Error::invalid("stretch scale must exceed 1"));
    }
    let w = state.n_walkers();
    if w < 2 {
        return Err(Error::invalid("ensemble needs at least 2 walkers"));
    }
    let d = state.dim();
    let half = w / 2;
    let step = state.step_count as u64;
    for (active, partners) in [(0..half, half..w), (half..w, 0..half)] {
        let walkers = &state.walkers;
        let log_probs = &state.log_probs;
        let moves: Vec<Move> = active
            .clone()
            .into_par_iter()
            .map(|j| {
                let mut r = rng::stream(seed, Purpose::Mcmc, step * w as u64 + j as u64);
                let k = r.gen_range(partners.clone());
                let z = sample_stretch(&mut r, a);
                let xj = walkers.row(j);
                let xk = walkers.row(k);
                let theta: Vec<f64> = xj.iter().zip(xk).map(|(p, q)| q + z * (p - q)).collect();
                let lp = log_post(&theta);
                if lp.is_nan() {
                    return Move {
                        theta,
                        log_prob: lp,
                        accepted: false,
                        nan: true,
                    };
                }
                let log_ratio = (d as f64 - 1.0) * z.ln() + lp - log_probs[j];
                let u: f64 = r.gen();
                Move {
                    theta,
                    log_prob: lp,
                    accepted: u.ln() < log_ratio,
                    nan: false,
                }
            })
            .collect();
        for (j, m) in active.zip(moves) {
            state.nan_count += m.nan as usize;
            if m.accepted {
                state.walkers.row_mut(j).copy_from_slice(&m.theta);
                state.log_probs[j] = m.log_prob;
                state.accept_count += 1;
            }
        }
    }
    state.step_count += 1;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    /// Retained states in step order, walkers interleaved within each step.
    pub samples: Matrix,
    /// Acceptance rate over the retained steps.
    pub acceptance_rate: f64,
    pub nan_count: usize,
    /// Set when some window of `STAGNATION_WINDOW` steps accepted nothing.
    pub stagnated: bool,
}

/// Uniform draws from `init`, redrawn until the log-posterior is finite.
pub fn init_walkers<F>(log_post: &F, init: &BoxPrior, walkers: usize, seed: u64) -> Result<Matrix>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    init.validate()?;
    let d = init.dim();
    let rows: Vec<Vec<f64>> = (0..walkers)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::stream(seed, Purpose::Mcmc, (1 << 47) | j as u64);
            for _ in 0..INIT_ATTEMPTS {
                let th: Vec<f64> = (0..d)
                    .map(|i| r.gen_range(init.lo[i]..=init.hi[i]))
                    .collect();
                if log_post(&th).is_finite() {
                    return Ok(th);
                }
            }
            Err(Error::invalid(format!(
                "no finite log-posterior found for walker {j} in the initialization box"
            )))
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Runs the ensemble and keeps every walker state after burn-in until `n_samples` are collected.
pub fn run_chain<F>(log_post: &F, init: &BoxPrior, cfg: &McmcConfig) -> Result<ChainOutput>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let start = init_walkers(log_post, init, cfg.walkers, cfg.seed)?;
    let mut state = EnsembleState::new(start, log_post)?;
    let w = cfg.walkers;
    let keep_steps = cfg.n_samples.div_ceil(w);
    let mut samples = Matrix::zeros(cfg.n_samples, init.dim());
    let mut filled = 0;
    let mut stagnated = false;
    let mut window_start = (0, 0);
    let mut accept_at_burn = 0;
    for s in 0..cfg.burn_in + keep_steps {
        stretch_step(&mut state, log_post, cfg.stretch, cfg.seed)?;
        if state.step_count - window_start.0 == STAGNATION_WINDOW {
            if state.accept_count == window_start.1 && !stagnated {
                warn!(
                    "ensemble accepted no moves in steps {}..{}",
                    window_start.0, state.step_count
                );
                stagnated = true;
            }
            window_start = (state.step_count, state.accept_count);
        }
        if s + 1 == cfg.burn_in {
            accept_at_burn = state.accept_count;
        }
        if s >= cfg.burn_in {
            for j in 0..w {
                if filled == cfg.n_samples {
                    break;
                }
                samples
                    .row_mut(filled)
                    .copy_from_slice(state.walkers.row(j));
                filled += 1;
            }
        }
    }
    if state.nan_count > 0 {
        warn!(
            "{} proposals rejected for NaN log-posterior",
            state.nan_count
        );
    }
    Ok(ChainOutput {
        samples,
        acceptance_rate: (state.accept_count - accept_at_burn) as f64 / (keep_steps * w) as f64,
        nan_count: state.nan_count,
        stagnated,
    })
}

/// Mean of `values` and its batch-means standard error with `n_batches` contiguous batches.
pub fn batch_means(values: &[f64], n_batches: usize) -> Result<(f64, f64)> {
    if n_batches < 2 || values.len() < n_batches {
        return Err(Error::invalid("need at least two nonempty batches"));
    }
    let len = values.len() / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| values[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n_batches - 1) as f64;
    Ok((m, (var / n_batches as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{
        burgers_reference_loglike, BurgersProblem, ForwardProblem, QuadraticProblem,
    };

    fn gauss_2d(x: &[f64]) -> f64 {
        // covariance [[1, 0.8], [0.8, 1]]
        let det = 1.0 - 0.64;
        -0.5 * (x[0] * x[0] - 1.6 * x[0] * x[1] + x[1] * x[1]) / det
    }

    fn cfg(burn_in: usize, n_samples: usize, seed: u64) -> McmcConfig {
        McmcConfig {
            burn_in,
            n_samples,
            seed,
            ..McmcConfig::default()
        }
    }

    #[test]
    fn stretch_variable_has_the_right_law() {
        let mut r = rng::stream(1, Purpose::Mcmc, 0);
        let n = 200_000;
        let a: f64 = 2.0;
        let zs: Vec<f64> = (0..n).map(|_| sample_stretch(&mut r, a)).collect();
        assert!(zs.iter().all(|z| (1.0 / a..=a).contains(z)));
        // E[Z] for g(z) = 1 / (2 (sqrt(a) - 1/sqrt(a)) sqrt(z))
        let c = 1.0 / (2.0 * (a.sqrt() - 1.0 / a.sqrt()));
        let exact = c * 2.0 / 3.0 * (a.powf(1.5) - a.powf(-1.5));
        let mean = zs.iter().sum::<f64>() / n as f64;
        assert!((mean - exact).abs() < 3e-3, "{mean} vs {exact}");
    }

    #[test]
    fn standard_normal_moments() {
        let box1 = BoxPrior::new(vec![-1.0], vec![1.0]).unwrap();
        let out = run_chain(
            &|x: &[f64]| -0.5 * x[0] * x[0],
            &box1,
            &cfg(20_000, 10_000, 1),
        )
        .unwrap();
        let v = out.samples.column(0);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        assert!(m.abs() < 0.1, "{m}");
        assert!((0.85..1.15).contains(&var), "{var}");
        assert!((0.2..0.8).contains(&out.acceptance_rate));
    }

    #[test]
    fn correlated_gaussian_within_three_standard_errors() {
        let init = BoxPrior::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let out = run_chain(&gauss_2d, &init, &cfg(2000, 200_000, 2)).unwrap();
        let s = &out.samples;
        let stat = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> { s.iter_rows().map(f).collect() };
        for (vals, truth) in [
            (stat(&|x| x[0]), 0.0),
            (stat(&|x| x[1]), 0.0),
            (stat(&|x| x[0] * x[0]), 1.0),
            (stat(&|x| x[1] * x[1]), 1.0),
            (stat(&|x| x[0] * x[1]), 0.8),
        ] {
            let (m, se) = batch_means(&vals, 40).unwrap();
            assert!((m - truth).abs() < 3.0 * se, "{m} vs {truth} (se {se})");
        }
        assert!((0.2..0.8).contains(&out.acceptance_rate));
    }

    #[test]
    fn flat_target_accepts_often() {
        let init = BoxPrior::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let out = run_chain(&|_: &[f64]| 0.0, &init, &cfg(0, 2000, 3)).unwrap();
        assert!(out.acceptance_rate >= 0.5, "{}", out.acceptance_rate);
        assert!(!out.stagnated);
    }

    #[test]
    fn invalid_settings() {
        let init = BoxPrior::new(vec![0.0], vec![1.0]).unwrap();
        let f = |x: &[f64]| -x[0] * x[0];
        let mut c = cfg(10, 10, 0);
        c.stretch = 1.0;
        assert!(run_chain(&f, &init, &c).is_err());
        let mut st = EnsembleState::new(Matrix::column_vector(&[0.1, 0.2]), &f).unwrap();
        assert!(stretch_step(&mut st, &f, 1.0, 0).is_err());
        c = cfg(10, 10, 0);
        c.walkers = 1;
        assert!(run_chain(&f, &init, &c).is_err());
    }

    #[test]
    fn nan_proposals_are_rejected_and_counted() {
        let f = |x: &[f64]| if x[0] > 0.5 { f64::NAN } else { -x[0] * x[0] };
        let init = BoxPrior::new(vec![-0.5], vec![0.5]).unwrap();
        let out = run_chain(&f, &init, &cfg(200, 1000, 4)).unwrap();
        assert!(out.nan_count > 0);
        assert!(out.samples.column(0).iter().all(|x| *x <= 0.5));
    }

    #[test]
    fn stuck_ensemble_is_flagged() {
        let init = BoxPrior::new(vec![0.0], vec![1.0]).unwrap();
        let f = |x: &[f64]| {
            if x[0] == 0.25 || x[0] == 0.75 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        };
        let start = Matrix::column_vector(&[0.25, 0.75]);
        let mut st = EnsembleState::new(start, &f).unwrap();
        for _ in 0..10 {
            stretch_step(&mut st, &f, 2.0, 0).unwrap();
        }
        assert_eq!(st.accept_count, 0);
        let g = |x: &[f64]| if x[0] < 0.5 { 0.0 } else { -1e6 * x[0] };
        let mut c = cfg(0, 4 * STAGNATION_WINDOW, 0);
        c.walkers = 4;
        let out = run_chain(&g, &init, &c).unwrap();
        assert!(!out.stagnated);
        assert!(run_chain(&f, &init, &c).is_err());
    }

    #[test]
    fn fixed_seed_reproduces() {
        let init = BoxPrior::new(vec![-1.0], vec![1.0]).unwrap();
        let f = |x: &[f64]| -0.5 * x[0] * x[0];
        let a = run_chain(&f, &init, &cfg(100, 500, 9)).unwrap();
        let b = run_chain(&f, &init, &cfg(100, 500, 9)).unwrap();
        let c = run_chain(&f, &init, &cfg(100, 500, 10)).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn quadratic_single_mode_restriction() {
        let q = QuadraticProblem::default();
        let post = q.posterior(1.0);
        let f = |x: &[f64]| {
            if x[0] < 0.0 {
                f64::NEG_INFINITY
            } else {
                post.log_pdf(x[0])
            }
        };
        let init = BoxPrior::new(vec![0.5], vec![1.5]).unwrap();
        let out = run_chain(&f, &init, &cfg(2000, 400_000, 5)).unwrap();
        let v = out.samples.column(0);
        assert!(v.iter().all(|x| *x > 0.0));
        // half-line posterior mean by midpoint quadrature
        let h = 1e-5;
        let (mut z, mut m1) = (0.0, 0.0);
        for i in 0..400_000 {
            let t = h * (i as f64 + 0.5);
            z += post.pdf(t);
            m1 += t * post.pdf(t);
        }
        let (m, se) = batch_means(&v, 20).unwrap();
        assert!((m - m1 / z).abs() < 3.0 * se, "{m} vs {} (se {se})", m1 / z);
        assert!(se < 0.05);
    }

    #[test]
    fn burgers_reference_posterior_mean() {
        let p = BurgersProblem::default();
        let y = p.reference_observe(&[0.05]).unwrap();
        let f = |x: &[f64]| {
            if !p.prior.contains(x) {
                return f64::NEG_INFINITY;
            }
            burgers_reference_loglike(&p, x[0], &y).unwrap_or(f64::NEG_INFINITY)
        };
        // quadrature oracle on a fine mesh around the truth
        let h = 1e-6;
        let mesh: Vec<f64> = (0..=2000).map(|i| 0.049 + h * i as f64).collect();
        let lw: Vec<f64> = mesh.iter().map(|x| f(&[*x])).collect();
        let lmax = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|l| (l - lmax).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean: f64 = mesh.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
        let sd = (mesh
            .iter()
            .zip(&w)
            .map(|(x, w)| (x - mean).powi(2) * w)
            .sum::<f64>()
            / z)
            .sqrt();

        let init = BoxPrior::new(vec![0.04], vec![0.06]).unwrap();
        let out = run_chain(&f, &init, &cfg(3000, 5000, 6)).unwrap();
        let v = out.samples.column(0);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        assert!((m - mean).abs() < 2.0 * sd, "{m} vs {mean} (sd {sd})");
        assert!((mean - 0.05).abs() < sd);
    }

    #[test]
    fn batch_means_of_iid_noise() {
        let v = rng::normal_vec(1, Purpose::Subsample, 0, 40_000);
        let (m, se) = batch_means(&v, 40).unwrap();
        assert!((se - 0.005).abs() < 0.0015, "{se}");
        assert!(m.abs() < 4.0 * se);
        assert!(batch_means(&v[..1], 2).is_err());
    }
}
