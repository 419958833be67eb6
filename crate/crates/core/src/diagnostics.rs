//! Posterior-quality metrics on uniform evaluation meshes.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::matrix::Matrix;
use crate::refinement::{fit_kde_with, BandwidthRule};

/// Floor applied to the approximate density wherever the exact one is positive.
pub const KL_FLOOR: f64 = 1e-300;

/// Subsample size for the cross-validated bandwidth of plotted densities.
pub const DENSITY_CV_POINTS: usize = 2000;

/// A uniform mesh of `counts` cells per dimension over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let g = Self { lo, hi, counts };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lo.len();
        if d == 0 || d > 2 {
            return Err(Error::invalid("density grids are 1-D or 2-D"));
        }
        if self.hi.len() != d || self.counts.len() != d {
            return Err(Error::dims(
                d,
                self.hi.len().min(self.counts.len()),
                "grid bounds",
            ));
        }
        for i in 0..d {
            if !(self.hi[i] > self.lo[i]) || !self.lo[i].is_finite() || !self.hi[i].is_finite() {
                return Err(Error::invalid(format!(
                    "grid dimension {i} has empty range"
                )));
            }
            if self.counts[i] == 0 {
                return Err(Error::invalid("grid cell counts must be positive"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (self.hi[i] - self.lo[i]) / self.counts[i] as f64)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    /// Cell midpoints, first coordinate varying slowest.
    pub fn points(&self) -> Matrix {
        let h = self.spacing();
        let d = self.dim();
        let mut m = Matrix::zeros(self.len(), d);
        for k in 0..self.len() {
            let mut rem = k;
            for i in (0..d).rev() {
                let idx = rem % self.counts[i];
                rem /= self.counts[i];
                m.set(k, i, self.lo[i] + h[i] * (idx as f64 + 0.5));
            }
        }
        m
    }
}

/// Density values at the cell midpoints of a `GridBox`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub grid: GridBox,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(grid: GridBox, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::dims(grid.len(), values.len(), "density values"));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(
                "density values must be finite and nonnegative",
            ));
        }
        Ok(Self { grid, values })
    }

    /// Evaluates `f` at every cell midpoint.
    pub fn from_fn<F>(grid: GridBox, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let pts = grid.points();
        let values: Vec<f64> = (0..pts.rows())
            .into_par_iter()
            .map(|k| f(pts.row(k)))
            .collect();
        Self::new(grid, values)
    }

    /// Riemann sum of the values.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Rescales to unit Riemann mass.
    pub fn normalized(mut self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::DegenerateSamples(
                "density has no mass on the grid".into(),
            ));
        }
        self.values.iter_mut().for_each(|v| *v /= m);
        Ok(self)
    }

    /// CSV with columns `x_0[,x_1],density`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.grid.dim()).map(|i| format!("x_{i}")).collect();
        header.push("density".into());
        wtr.write_record(&header)?;
        let pts = self.grid.points();
        for (p, v) in pts.iter_rows().zip(&self.values) {
            let mut rec: Vec<String> = p.iter().map(|&x| fmt_f64(x)).collect();
            rec.push(fmt_f64(*v));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Riemann-sum `KL(p_exact || p_approx)` on a shared mesh.
pub fn kl_riemann(p_exact: &DensityGrid, p_approx: &DensityGrid) -> Result<f64> {
    if p_exact.grid != p_approx.grid {
        return Err(Error::GridMismatch(format!(
            "{:?} vs {:?}",
            p_exact.grid, p_approx.grid
        )));
    }
    let s: f64 = p_exact
        .values
        .iter()
        .zip(&p_approx.values)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(KL_FLOOR).ln()))
        .sum();
    Ok(s * p_exact.grid.cell_volume())
}

/// KDE of `samples` on the mesh, renormalized to unit Riemann mass.
pub fn density_from_samples(samples: &Matrix, grid: &GridBox) -> Result<DensityGrid> {
    grid.validate()?;
    if samples.cols() != grid.dim() {
        return Err(Error::dims(grid.dim(), samples.cols(), "sample columns"));
    }
    let kde = fit_kde_with(
        samples,
        &BandwidthRule::CrossValidated {
            max_points: DENSITY_CV_POINTS,
        },
    )?;
    DensityGrid::from_fn(grid.clone(), |x| kde.density(x))?.normalized()
}

/// Fraction of samples inside each ball `|theta - c| <= radius`.
pub fn mode_mass(samples: &Matrix, centers: &[Vec<f64>], radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return Err(Error::invalid("mode radius must be positive"));
    }
    if samples.rows() == 0 {
        return Err(Error::DegenerateSamples("no samples".into()));
    }
    for c in centers {
        if c.len() != samples.cols() {
            return Err(Error::dims(samples.cols(), c.len(), "mode center"));
        }
    }
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if dist2(&centers[i], &centers[j]).sqrt() <= 2.0 * radius {
                return Err(Error::invalid(format!("mode balls {i} and {j} overlap")));
            }
        }
    }
    let r2 = radius * radius;
    let mut counts = vec![0usize; centers.len()];
    for s in samples.iter_rows() {
        if let Some(i) = centers.iter().position(|c| dist2(s, c) <= r2) {
            counts[i] += 1;
        }
    }
    let n = samples.rows() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
