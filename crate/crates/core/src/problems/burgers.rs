//! Viscous Burgers equation `u_t + (u^2/2)_x = nu u_xx` on `[-1, 1]` with
//! boundary values `u(-1) = 1 + delta`, `u(1) = -1`, relaxed to steady state.

use log::debug;
use serde::{Deserialize, Serialize};

use super::{Fidelity, ForwardProblem};
use crate::diffusion::BoxPrior;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurgersProblem {
    pub delta: f64,
    pub prior: BoxPrior,
    pub n_grid_low: usize,
    pub n_grid_high: usize,
    pub dt: f64,
    pub max_steps: usize,
    /// Stop once `max |u_new - u| / dt` falls below this.
    pub steady_tol: f64,
    pub sensors: Vec<f64>,
    pub noise_std: f64,
}

impl Default for BurgersProblem {
    fn default() -> Self {
        Self {
            delta: 0.01,
            prior: BoxPrior {
                lo: vec![0.01],
                hi: vec![0.1],
            },
            n_grid_low: 400,
            n_grid_high: 800,
            dt: 0.01,
            max_steps: 50_000,
            steady_tol: 1e-8,
            sensors: (0..=20).map(|i| i as f64 * 0.05).collect(),
            noise_std: 0.01,
        }
    }
}

/// Grid values at the final step of a solve.
#[derive(Clone, Debug)]
pub struct BurgersSolution {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub steps: usize,
    /// `max |u_new - u| / dt` over the last step.
    pub residual: f64,
}

impl BurgersSolution {
    /// Linear interpolation of the grid solution.
    pub fn at(&self, x: f64) -> f64 {
        let n = self.x.len();
        let h = self.x[1] - self.x[0];
        let s = ((x - self.x[0]) / h).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let t = s - i as f64;
        (1.0 - t) * self.u[i] + t * self.u[i + 1]
    }
}

impl BurgersProblem {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.prior.dim() != 1 || self.prior.lo[0] <= 0.0 {
            return Err(Error::Config(
                "Burgers viscosity range must be a positive interval".into(),
            ));
        }
        if self.n_grid_low < 3 || self.n_grid_high < 3 {
            return Err(Error::Config("Burgers grids need at least 3 points".into()));
        }
        if !(self.dt > 0.0) || self.max_steps == 0 {
            return Err(Error::Config(
                "Burgers time step and step count must be positive".into(),
            ));
        }
        if self.sensors.is_empty() || self.sensors.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::Config("Burgers sensors must lie in [-1, 1]".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Config("Burgers noise std must be positive".into()));
        }
        Ok(())
    }

    pub fn n_grid(&self, fidelity: Fidelity) -> usize {
        match fidelity {
            Fidelity::Low => self.n_grid_low,
            Fidelity::High => self.n_grid_high,
        }
    }

    fn check_nu(&self, nu: f64) -> Result<()> {
        if !(nu >= self.prior.lo[0] && nu <= self.prior.hi[0]) {
            return Err(Error::invalid(format!(
                "viscosity {nu} outside [{}, {}]",
                self.prior.lo[0], self.prior.hi[0]
            )));
        }
        Ok(())
    }

    pub fn solve(&self, nu: f64, fidelity: Fidelity) -> Result<BurgersSolution> {
        self.check_nu(nu)?;
        burgers_solve(nu, self.n_grid(fidelity), self)
    }

    pub fn exact(&self, nu: f64) -> Result<BurgersExact> {
        self.check_nu(nu)?;
        burgers_exact(nu, self.delta)
    }
}

/// Semi-implicit Euler: explicit central advection, implicit central diffusion.
pub fn burgers_solve(nu: f64, n_grid: usize, cfg: &BurgersProblem) -> Result<BurgersSolution> {
    if n_grid < 3 {
        return Err(Error::invalid("Burgers grid needs at least 3 points"));
    }
    if !(nu > 0.0) {
        return Err(Error::invalid("viscosity must be positive"));
    }
    let n = n_grid;
    let dx = 2.0 / (n - 1) as f64;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            if i == n - 1 {
                1.0
            } else {
                -1.0 + dx * i as f64
            }
        })
        .collect();
    let (ul, ur) = (1.0 + cfg.delta, -1.0);
    let mut u: Vec<f64> = x
        .iter()
        .map(|&xi| -xi + cfg.delta * (1.0 - xi) / 2.0)
        .collect();
    u[0] = ul;
    u[n - 1] = ur;

    // constant tridiagonal (-r, 1 + 2r, -r): factor once
    let m = n - 2;
    let r = nu * cfg.dt / (dx * dx);
    let (off, diag) = (-r, 1.0 + 2.0 * r);
    let mut cp = vec![0.0; m];
    let mut inv = vec![0.0; m];
    inv[0] = 1.0 / diag;
    cp[0] = off * inv[0];
    for i in 1..m {
        inv[i] = 1.0 / (diag - off * cp[i - 1]);
        cp[i] = off * inv[i];
    }

    let adv = cfg.dt / (4.0 * dx);
    let mut rhs = vec![0.0; m];
    let mut residual = f64::INFINITY;
    let mut steps = 0;
    while steps < cfg.max_steps {
        for k in 0..m {
            let i = k + 1;
            rhs[k] = u[i] - adv * (u[i + 1] * u[i + 1] - u[i - 1] * u[i - 1]);
        }
        rhs[0] += r * ul;
        rhs[m - 1] += r * ur;
        // forward sweep, then back substitution
        rhs[0] *= inv[0];
        for k in 1..m {
            rhs[k] = (rhs[k] - off * rhs[k - 1]) * inv[k];
        }
        for k in (0..m - 1).rev() {
            rhs[k] -= cp[k] * rhs[k + 1];
        }
        let mut change: f64 = 0.0;
        for k in 0..m {
            change = change.max((rhs[k] - u[k + 1]).abs());
            u[k + 1] = rhs[k];
        }
        steps += 1;
        residual = change / cfg.dt;
        if !residual.is_finite() {
            return Err(Error::Unstable(format!(
                "Burgers solve at nu={nu}, N={n} blew up at step {steps}"
            )));
        }
        if residual < cfg.steady_tol {
            break;
        }
    }
    debug!("burgers nu={nu} N={n}: {steps} steps, residual {residual:.2e}");
    Ok(BurgersSolution {
        x,
        u,
        steps,
        residual,
    })
}

/// Steady profile `u(x) = -A tanh(A (x - z_ex) / (2 nu))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BurgersExact {
    pub a: f64,
    pub z_ex: f64,
    pub nu: f64,
    pub delta: f64,
}

impl BurgersExact {
    pub fn profile(&self, x: f64) -> f64 {
        -self.a * (self.a * (x - self.z_ex) / (2.0 * self.nu)).tanh()
    }

    /// Boundary-condition residuals at `x = -1` and `x = 1`.
    pub fn residual(&self) -> [f64; 2] {
        [
            self.profile(-1.0) - (1.0 + self.delta),
            self.profile(1.0) + 1.0,
        ]
    }
}

/// Solves the boundary conditions for `(A, z_ex)`.
///
/// With `w = atanh(1/A)` the right boundary gives `A = coth(w)` and
/// `1 - z_ex = 2 nu w / A`, leaving the scalar equation
/// `coth(w) tanh(coth(w)/nu - w) = 1 + delta`, solved by bisection. The
/// two-variable Newton system is nearly singular at small `nu`, where
/// `z_ex` is extremely sensitive to `delta`.
pub fn burgers_exact(nu: f64, delta: f64) -> Result<BurgersExact> {
    if !(nu > 0.0) || !(delta > -1.0) || !delta.is_finite() {
        return Err(Error::invalid(format!(
            "bad Burgers parameters nu={nu}, delta={delta}"
        )));
    }
    let coth = |w: f64| 1.0 / w.tanh();
    let h = |w: f64| coth(w) * (coth(w) / nu - w).tanh() - (1.0 + delta);

    // z_ex = -1 where nu w tanh(w) = 1; the root lies below that point
    let mut lo = 0.0;
    let mut hi = 2.0 / nu + 2.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if nu * mid * mid.tanh() < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w_max = lo;
    let mut a = (1e-3f64).min(0.5 * w_max);
    let mut b = w_max;
    let (ha, hb) = (h(a), h(b));
    if !(ha > 0.0 && hb < 0.0) {
        return Err(Error::NewtonFailed(format!(
            "no sign change for nu={nu}, delta={delta}: h({a})={ha}, h({b})={hb}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if h(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let w = if h(a).abs() < h(b).abs() { a } else { b };
    let big_a = coth(w);
    let sol = BurgersExact {
        a: big_a,
        z_ex: 1.0 - 2.0 * nu * w / big_a,
        nu,
        delta,
    };
    let res = sol.residual();
    if !(res[0].abs() < 1e-12 && res[1].abs() < 1e-12) {
        return Err(Error::NewtonFailed(format!(
            "boundary residual {res:?} at nu={nu}, delta={delta}"
        )));
    }
    Ok(sol)
}

/// `-1/2 (y - H(nu))^T Sigma^-1 (y - H(nu))` with `H` the exact steady profile.
pub fn burgers_reference_loglike(problem: &BurgersProblem, nu: f64, y_obs: &[f64]) -> Result<f64> {
    problem.reference_log_likelihood(&[nu], y_obs)
}

impl ForwardProblem for BurgersProblem {
    fn name(&self) -> &'static str {
        "burgers"
    }

    fn prior(&self) -> &BoxPrior {
        &self.prior
    }

    fn dim_y(&self) -> usize {
        self.sensors.len()
    }

    fn noise_var(&self) -> Result<Vec<f64>> {
        Ok(vec![self.noise_std * self.noise_std; self.sensors.len()])
    }

    fn observe(&self, theta: &[f64], fidelity: Fidelity) -> Result<Vec<f64>> {
        if theta.len() != 1 {
            return Err(Error::dims(1, theta.len(), "Burgers parameter"));
        }
        let sol = self.solve(theta[0], fidelity)?;
        Ok(self.sensors.iter().map(|&x| sol.at(x)).collect())
    }

    fn reference_observe(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != 1 {
            return Err(Error::dims(1, theta.len(), "Burgers parameter"));
        }
        let ex = self.exact(theta[0])?;
        Ok(self.sensors.iter().map(|&x| ex.profile(x)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_boundaries_center_the_layer() {
        // at small nu the layer position is not resolvable in double precision
        for nu in [0.5, 0.25, 0.1] {
            let ex = burgers_exact(nu, 0.0).unwrap();
            assert!(ex.z_ex.abs() < 1e-6, "nu={nu}: {}", ex.z_ex);
            assert!((ex.a * (ex.a / (2.0 * nu)).tanh() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_shifts_layer_right() {
        for nu in [0.01, 0.03, 0.05, 0.07, 0.1] {
            let ex = burgers_exact(nu, 0.01).unwrap();
            assert!(ex.z_ex > 0.0 && ex.z_ex < 1.0, "nu={nu}: {}", ex.z_ex);
            let r = ex.residual();
            assert!(r[0].abs() < 1e-12 && r[1].abs() < 1e-12);
        }
    }

    #[test]
    fn layer_moves_left_as_viscosity_grows() {
        let z: Vec<f64> = [0.02, 0.04, 0.06, 0.08]
            .iter()
            .map(|&nu| burgers_exact(nu, 0.01).unwrap().z_ex)
            .collect();
        assert!(z.windows(2).all(|w| w[1] < w[0]), "{z:?}");
    }

    #[test]
    fn solver_matches_steady_profile() {
        let p = BurgersProblem::default();
        let sol = p.solve(0.05, Fidelity::High).unwrap();
        assert_eq!(sol.u[0], 1.01);
        assert_eq!(*sol.u.last().unwrap(), -1.0);
        assert!(sol.u.windows(2).all(|w| w[1] < w[0] + 1e-12));
        let ex = p.exact(0.05).unwrap();
        let err = p
            .sensors
            .iter()
            .map(|&x| (sol.at(x) - ex.profile(x)).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-2, "{err}");
    }

    #[test]
    fn residual_decreases_over_the_run() {
        let mut p = BurgersProblem::default();
        p.max_steps = 200;
        let early = burgers_solve(0.05, 400, &p).unwrap().residual;
        p.max_steps = 5000;
        let late = burgers_solve(0.05, 400, &p).unwrap().residual;
        assert!(late < early, "{late} vs {early}");
    }

    #[test]
    fn refinement_reduces_sensor_error() {
        let p = BurgersProblem::default();
        let ex = p.exact(0.07).unwrap();
        let err = |fid| {
            let y = p.observe(&[0.07], fid).unwrap();
            y.iter()
                .zip(&p.sensors)
                .map(|(v, &x)| (v - ex.profile(x)).abs())
                .fold(0.0, f64::max)
        };
        assert!(err(Fidelity::High) < err(Fidelity::Low));
    }

    #[test]
    fn reference_loglike_properties() {
        let p = BurgersProblem::default();
        let y = p.reference_observe(&[0.05]).unwrap();
        assert_eq!(burgers_reference_loglike(&p, 0.05, &y).unwrap(), 0.0);

        // constant shift c: loglike changes by -L c^2 / (2 sigma^2) at the truth
        let c = 0.003;
        let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
        let ll = burgers_reference_loglike(&p, 0.05, &ys).unwrap();
        let expected = -(21.0 * c * c) / (2.0 * 1e-4);
        assert!((ll - expected).abs() < 1e-9 * expected.abs());

        // self-consistency: the grid argmax recovers the generating viscosity
        let step = 1e-4;
        let best = (0..=900)
            .map(|i| 0.01 + step * i as f64)
            .max_by(|a, b| {
                let la = burgers_reference_loglike(&p, *a, &y).unwrap();
                let lb = burgers_reference_loglike(&p, *b, &y).unwrap();
                la.total_cmp(&lb)
            })
            .unwrap();
        assert!((best - 0.05).abs() <= step, "{best}");
    }

    #[test]
    fn rejects_out_of_range_viscosity() {
        let p = BurgersProblem::default();
        assert!(p.observe(&[0.5], Fidelity::Low).is_err());
        assert!(p.reference_observe(&[0.0]).is_err());
    }
}
