use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::matrix::Matrix;

/// Uniform prior on an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrior {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxPrior {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::invalid(
                "box bounds must be non-empty and of equal length",
            ));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid(format!(
                "box requires lo < hi componentwise: {:?} vs {:?}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&t, (&l, &h))| t >= l && t <= h)
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -self.volume().ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn density(&self, theta: &[f64]) -> f64 {
        self.log_density(theta).exp()
    }

    /// Componentwise intersection; `None` when some interval is empty.
    pub fn intersect(&self, other: &BoxPrior) -> Option<BoxPrior> {
        let lo: Vec<f64> = self
            .lo
            .iter()
            .zip(&other.lo)
            .map(|(a, b)| a.max(*b))
            .collect();
        let hi: Vec<f64> = self
            .hi
            .iter()
            .zip(&other.hi)
            .map(|(a, b)| a.min(*b))
            .collect();
        if lo.iter().zip(&hi).all(|(l, h)| l <= h) {
            Some(BoxPrior { lo, hi })
        } else {
            None
        }
    }
}

/// Paired parameter/observation samples used by the Monte-Carlo score estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDataset {
    pub thetas: Matrix,
    pub obs: Matrix,
    /// Diagonal of the observation-noise covariance.
    pub sigma_diag: Vec<f64>,
    pub domain: BoxPrior,
}

/// Everything about a [`PriorDataset`] that is not stored in its CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sigma_diag: Vec<f64>,
    pub domain: BoxPrior,
}

impl PriorDataset {
    pub fn new(
        thetas: Matrix,
        obs: Matrix,
        sigma_diag: Vec<f64>,
        domain: BoxPrior,
    ) -> Result<Self> {
        domain.validate()?;
        if thetas.rows() == 0 {
            return Err(Error::invalid(
                "prior dataset must contain at least one sample",
            ));
        }
        if obs.rows() != thetas.rows() {
            return Err(Error::dims(thetas.rows(), obs.rows(), "observation rows"));
        }
        if thetas.cols() != domain.dim() {
            return Err(Error::dims(
                domain.dim(),
                thetas.cols(),
                "parameter dimension",
            ));
        }
        if sigma_diag.len() != obs.cols() {
            return Err(Error::dims(obs.cols(), sigma_diag.len(), "noise variances"));
        }
        if sigma_diag.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise variances must be strictly positive"));
        }
        if let Some(i) = (0..thetas.rows()).find(|&i| !domain.contains(thetas.row(i))) {
            return Err(Error::invalid(format!(
                "sample {i} ({:?}) lies outside the prior box",
                thetas.row(i)
            )));
        }
        Ok(Self {
            thetas,
            obs,
            sigma_diag,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.rows() == 0
    }

    pub fn dim_theta(&self) -> usize {
        self.thetas.cols()
    }

    pub fn dim_obs(&self) -> usize {
        self.obs.cols()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            sigma_diag: self.sigma_diag.clone(),
            domain: self.domain.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        io::write_blocks(w, &[("theta", &self.thetas), ("y", &self.obs)])
    }

    pub fn read_csv<R: Read>(r: R, meta: DatasetMeta) -> Result<Self> {
        let t = io::read_table(r)?;
        Self::new(
            t.block("theta")?,
            t.block("y")?,
            meta.sigma_diag,
            meta.domain,
        )
    }
}

/// Supervised training pairs produced by reverse-ODE solves.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    /// Conditioning observations; absent for sets built at a fixed observation.
    pub cond_obs: Option<Matrix>,
    pub latents: Matrix,
    pub targets: Matrix,
}

impl LabeledSet {
    pub fn new(cond_obs: Option<Matrix>, latents: Matrix, targets: Matrix) -> Result<Self> {
        if latents.rows() != targets.rows() {
            return Err(Error::dims(latents.rows(), targets.rows(), "label targets"));
        }
        if let Some(c) = &cond_obs {
            if c.rows() != latents.rows() {
                return Err(Error::dims(latents.rows(), c.rows(), "conditioning rows"));
            }
        }
        Ok(Self {
            cond_obs,
            latents,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.rows() == 0
    }

    /// Network inputs: `[y | z]` for conditional sets, `z` otherwise.
    pub fn inputs(&self) -> Matrix {
        match &self.cond_obs {
            Some(c) => Matrix::hstack(c, &self.latents).expect("row counts checked in new"),
            None => self.latents.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        match &self.cond_obs {
            Some(c) => io::write_blocks(
                w,
                &[("theta", &self.targets), ("y", c), ("z", &self.latents)],
            ),
            None => io::write_blocks(w, &[("theta", &self.targets), ("z", &self.latents)]),
        }
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let t = io::read_table(r)?;
        let cond = if t.has_block("y") {
            Some(t.block("y")?)
        } else {
            None
        };
        Self::new(cond, t.block("z")?, t.block("theta")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> BoxPrior {
        BoxPrior::new(vec![-1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn box_density_and_membership() {
        let b = BoxPrior::new(vec![0.0, 20.0], vec![2.0, 30.0]).unwrap();
        assert_eq!(b.volume(), 20.0);
        assert!((b.density(&[1.0, 25.0]) - 0.05).abs() < 1e-15);
        assert_eq!(b.density(&[3.0, 25.0]), 0.0);
        assert!(BoxPrior::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let th = Matrix::column_vector(&[0.0, 0.5]);
        let y = Matrix::column_vector(&[0.0, 0.25]);
        assert!(PriorDataset::new(th.clone(), y.clone(), vec![0.1], unit_box()).is_ok());
        assert!(PriorDataset::new(th.clone(), y.clone(), vec![0.0], unit_box()).is_err());
        assert!(PriorDataset::new(th.clone(), y.clone(), vec![0.1, 0.1], unit_box()).is_err());
        let outside = Matrix::column_vector(&[0.0, 1.5]);
        assert!(PriorDataset::new(outside, y, vec![0.1], unit_box()).is_err());
        assert!(PriorDataset::new(
            Matrix::zeros(0, 1),
            Matrix::zeros(0, 1),
            vec![0.1],
            unit_box()
        )
        .is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let th = Matrix::column_vector(&[-0.2, 0.1, 0.7]);
        let y = Matrix::from_rows(&[[0.04, 1.0], [0.01, 2.0], [0.49, 1e-300]]).unwrap();
        let ds = PriorDataset::new(th, y, vec![0.1, 0.2], unit_box()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("theta_0,y_0,y_1\n"));
        let back = PriorDataset::read_csv(&buf[..], ds.meta()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn labeled_set_csv_round_trip() {
        let z = Matrix::column_vector(&[0.3, -1.2]);
        let t = Matrix::column_vector(&[1.0, -1.0]);
        let y = Matrix::column_vector(&[1.1, 0.9]);
        let set = LabeledSet::new(Some(y), z.clone(), t.clone()).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        assert_eq!(LabeledSet::read_csv(&buf[..]).unwrap(), set);
        assert_eq!(set.inputs().row(1), &[0.9, -1.2]);

        let uncond = LabeledSet::new(None, z, t).unwrap();
        let mut buf = Vec::new();
        uncond.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("theta_0,z_0\n"));
        assert_eq!(LabeledSet::read_csv(&buf[..]).unwrap(), uncond);
    }
}
