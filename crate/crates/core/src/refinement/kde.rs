//! Gaussian product-kernel density estimation.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::matrix::Matrix;

/// How kernel widths are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Silverman's rule `std_i (4 / ((d + 2) K))^{1/(d+4)}`, scaled by `multiplier`.
    Silverman { multiplier: f64 },
    /// Silverman widths scaled by the multiplier maximizing the leave-one-out
    /// log-likelihood on an evenly strided subsample of at most `max_points`.
    CrossValidated { max_points: usize },
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::Silverman { multiplier: 1.0 }
    }
}

/// Anything that can serve as a proposal density over parameters.
pub trait LogDensity {
    fn log_density(&self, theta: &[f64]) -> f64;
}

impl LogDensity for crate::diffusion::BoxPrior {
    fn log_density(&self, theta: &[f64]) -> f64 {
        crate::diffusion::BoxPrior::log_density(self, theta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    samples: Matrix,
    bandwidth: Vec<f64>,
    log_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct KdeSidecar {
    bandwidth: Vec<f64>,
}

fn silverman_factor(k: usize, d: usize) -> f64 {
    (4.0 / ((d as f64 + 2.0) * k as f64)).powf(1.0 / (d as f64 + 4.0))
}

impl KdeModel {
    pub fn new(samples: Matrix, bandwidth: Vec<f64>) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::DegenerateSamples("no samples".into()));
        }
        if bandwidth.len() != samples.cols() {
            return Err(Error::dims(samples.cols(), bandwidth.len(), "bandwidths"));
        }
        if bandwidth.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::invalid("bandwidths must be positive and finite"));
        }
        let log_norm = -(samples.rows() as f64).ln()
            - bandwidth
                .iter()
                .map(|h| (h * (2.0 * PI).sqrt()).ln())
                .sum::<f64>();
        Ok(Self {
            samples,
            bandwidth,
            log_norm,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for s in self.samples.iter_rows() {
            let mut q = 0.0;
            for ((x, m), h) in theta.iter().zip(s).zip(&self.bandwidth) {
                let r = (x - m) / h;
                q += r * r;
            }
            let l = -0.5 * q;
            if l > max {
                sum = sum * (max - l).exp() + 1.0;
                max = l;
            } else {
                sum += (l - max).exp();
            }
        }
        max + sum.ln() + self.log_norm
    }

    pub fn density(&self, theta: &[f64]) -> f64 {
        self.log_density(theta).exp()
    }

    /// Writes the samples as CSV (`theta_*` columns) and bandwidths as JSON.
    pub fn write<W1: Write, W2: Write>(&self, samples_csv: W1, sidecar_json: W2) -> Result<()> {
        io::write_blocks(samples_csv, &[("theta", &self.samples)])?;
        serde_json::to_writer_pretty(
            sidecar_json,
            &KdeSidecar {
                bandwidth: self.bandwidth.clone(),
            },
        )?;
        Ok(())
    }

    pub fn read<R1: Read, R2: Read>(samples_csv: R1, sidecar_json: R2) -> Result<Self> {
        let t = io::read_table(samples_csv)?;
        let side: KdeSidecar = serde_json::from_reader(sidecar_json)?;
        Self::new(t.block("theta")?, side.bandwidth)
    }
}

impl LogDensity for KdeModel {
    fn log_density(&self, theta: &[f64]) -> f64 {
        KdeModel::log_density(self, theta)
    }
}

fn check_samples(samples: &Matrix) -> Result<Vec<f64>> {
    if samples.rows() < 2 {
        return Err(Error::DegenerateSamples(format!(
            "need at least 2 samples, got {}",
            samples.rows()
        )));
    }
    if !samples.all_finite() {
        return Err(Error::DegenerateSamples("non-finite sample values".into()));
    }
    let stds: Vec<f64> = (0..samples.cols()).map(|j| samples.column_std(j)).collect();
    if let Some(j) = stds.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateSamples(format!(
            "zero variance in dimension {j}"
        )));
    }
    Ok(stds)
}

/// Gaussian product-kernel KDE with Silverman bandwidths.
pub fn fit_kde(samples: &Matrix) -> Result<KdeModel> {
    fit_kde_with(samples, &BandwidthRule::default())
}

pub fn fit_kde_with(samples: &Matrix, rule: &BandwidthRule) -> Result<KdeModel> {
    let stds = check_samples(samples)?;
    let (k, d) = (samples.rows(), samples.cols());
    let base: Vec<f64> = stds.iter().map(|s| s * silverman_factor(k, d)).collect();
    let multiplier = match rule {
        BandwidthRule::Silverman { multiplier } => {
            if !(*multiplier > 0.0) {
                return Err(Error::invalid("bandwidth multiplier must be positive"));
            }
            *multiplier
        }
        BandwidthRule::CrossValidated { max_points } => cv_multiplier(samples, *max_points)?,
    };
    KdeModel::new(
        samples.clone(),
        base.into_iter().map(|h| h * multiplier).collect(),
    )
}

/// Multiplier on Silverman widths maximizing the leave-one-out log-likelihood.
fn cv_multiplier(samples: &Matrix, max_points: usize) -> Result<f64> {
    let k = samples.rows();
    let m = k.min(max_points.max(16));
    let stride = k as f64 / m as f64;
    let idx: Vec<usize> = (0..m).map(|i| (i as f64 * stride) as usize).collect();
    let sub = samples.select_rows(&idx);
    let stds = check_samples(&sub)?;
    let d = sub.cols();
    let base: Vec<f64> = stds.iter().map(|s| s * silverman_factor(m, d)).collect();

    // squared distances in units of the base widths
    let mut d2 = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let q: f64 = sub
                .row(i)
                .iter()
                .zip(sub.row(j))
                .zip(&base)
                .map(|((a, b), h)| ((a - b) / h).powi(2))
                .sum();
            d2[i * m + j] = q;
            d2[j * m + i] = q;
        }
    }

    let candidates: Vec<f64> = (0..41)
        .map(|i| 10f64.powf(-1.5 + 1.75 * i as f64 / 40.0))
        .collect();
    let mut best = (f64::NEG_INFINITY, 1.0);
    for &c in &candidates {
        let inv = 0.5 / (c * c);
        let mut total = 0.0;
        for i in 0..m {
            let row = &d2[i * m..(i + 1) * m];
            let s: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (-q * inv).exp())
                .sum();
            total += (s.max(f64::MIN_POSITIVE)).ln();
        }
        let score = total - m as f64 * d as f64 * c.ln();
        if score > best.0 {
            best = (score, c);
        }
    }
    Ok(best.1)
}
