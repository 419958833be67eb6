//! Fully-connected generator networks.
//!
//! `G_low(y, z)` takes `[y | z]` and `G_high(z)` takes `z`; both return a
//! parameter vector of the same dimension as `z`. Inputs and outputs are
//! standardized with constants stored in the model.

mod train;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

pub use train::{
    mlp_gradient_check, mlp_loss, mlp_loss_and_grad, mlp_train, EarlyStopping, TrainConfig,
    TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activated value.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Per-feature affine map `x_std = (x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Column means and standard deviations; constant columns keep scale 1.
    pub fn fit(data: &Matrix) -> Self {
        let n = data.cols();
        let mut shift = vec![0.0; n];
        let mut scale = vec![1.0; n];
        for j in 0..n {
            shift[j] = data.column_mean(j);
            let s = if data.rows() > 1 {
                data.column_std(j)
            } else {
                0.0
            };
            if s.is_finite() && s > 1e-12 * (1.0 + shift[j].abs()) {
                scale[j] = s;
            }
        }
        Self { shift, scale }
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    #[inline]
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), (m, s)) in out
            .iter_mut()
            .zip(x)
            .zip(self.shift.iter().zip(&self.scale))
        {
            *o = (v - m) / s;
        }
    }

    #[inline]
    pub fn inverse_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), (m, s)) in out
            .iter_mut()
            .zip(x)
            .zip(self.shift.iter().zip(&self.scale))
        {
            *o = m + s * v;
        }
    }
}

/// Multilayer perceptron with a linear output layer.
///
/// `weights[l]` is `layer_dims[l+1] x layer_dims[l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated model has layers")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.rows() * w.cols())
            .sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(&self.layer_dims)?;
        let n = self.layer_dims.len() - 1;
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::dims(n, self.weights.len(), "layer count"));
        }
        for l in 0..n {
            let (i, o) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.weights[l];
            if w.rows() != o || w.cols() != i || w.as_slice().len() != o * i {
                return Err(Error::invalid(format!(
                    "layer {l} weight is {}x{}, expected {o}x{i}",
                    w.rows(),
                    w.cols()
                )));
            }
            if self.biases[l].len() != o {
                return Err(Error::dims(o, self.biases[l].len(), "bias length"));
            }
        }
        let norm_ok = |s: &Standardizer, n: usize| {
            s.shift.len() == n
                && s.scale.len() == n
                && s.scale.iter().all(|v| v.is_finite() && *v > 0.0)
                && s.shift.iter().all(|v| v.is_finite())
        };
        if !norm_ok(&self.input_norm, self.input_dim()) {
            return Err(Error::invalid(
                "input normalization does not match input layer",
            ));
        }
        if !norm_ok(&self.output_norm, self.output_dim()) {
            return Err(Error::invalid(
                "output normalization does not match output layer",
            ));
        }
        Ok(())
    }

    /// Flattened parameters: each layer's weights (row-major) then its biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::dims(self.n_params(), p.len(), "parameter vector"));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let ws = w.as_mut_slice();
            ws.copy_from_slice(&p[k..k + ws.len()]);
            k += ws.len();
            let nb = b.len();
            b.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let m: MlpModel = io::read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!(
            "a network needs input and output layers, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "layer sizes must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

/// Zero biases and weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn mlp_init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<MlpModel> {
    check_dims(layer_dims)?;
    let mut rng = rng::stream(seed, Purpose::NetworkInit, 0);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_dims.windows(2) {
        let (i, o) = (pair[0], pair[1]);
        let bound = 1.0 / (i as f64).sqrt();
        let data = (0..i * o).map(|_| rng.gen_range(-bound..bound)).collect();
        weights.push(Matrix::from_vec(o, i, data)?);
        biases.push(vec![0.0; o]);
    }
    Ok(MlpModel {
        layer_dims: layer_dims.to_vec(),
        activation,
        weights,
        biases,
        input_norm: Standardizer::identity(layer_dims[0]),
        output_norm: Standardizer::identity(*layer_dims.last().unwrap()),
    })
}

/// Reusable activation buffers for one forward pass.
pub(crate) struct Workspace {
    pub acts: Vec<Vec<f64>>,
}

impl Workspace {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            acts: model.layer_dims.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Forward pass in standardized coordinates; `ws.acts[0]` must already hold the
/// standardized input. Leaves the standardized output in the last buffer.
pub(crate) fn forward_std(model: &MlpModel, ws: &mut Workspace) {
    let last = model.n_layers() - 1;
    for l in 0..=last {
        let (head, tail) = ws.acts.split_at_mut(l + 1);
        let a = &head[l];
        let out = &mut tail[0];
        let w = &model.weights[l];
        let cols = w.cols();
        let wd = w.as_slice();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut s = model.biases[l][r];
            for (wi, ai) in row.iter().zip(a) {
                s += wi * ai;
            }
            *o = if l == last {
                s
            } else {
                model.activation.apply(s)
            };
        }
    }
}

pub(crate) fn forward_into(model: &MlpModel, x: &[f64], ws: &mut Workspace, out: &mut [f64]) {
    model.input_norm.forward_into(x, &mut ws.acts[0]);
    forward_std(model, ws);
    model
        .output_norm
        .inverse_into(ws.acts.last().expect("layers"), out);
}

pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::dims(model.input_dim(), x.len(), "network input"));
    }
    let mut ws = Workspace::new(model);
    let mut out = vec![0.0; model.output_dim()];
    forward_into(model, x, &mut ws, &mut out);
    Ok(out)
}

/// Row-wise forward pass over a batch.
pub fn mlp_forward_batch(model: &MlpModel, inputs: &Matrix) -> Result<Matrix> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::dims(
            model.input_dim(),
            inputs.cols(),
            "network input",
        ));
    }
    let d = model.output_dim();
    let mut out = Matrix::zeros(inputs.rows(), d);
    if inputs.rows() == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(d)
        .zip(inputs.as_slice().par_chunks(inputs.cols()))
        .for_each_init(
            || Workspace::new(model),
            |ws, (o, x)| forward_into(model, x, ws, o),
        );
    Ok(out)
}

/// Pushes `count` latent draws through the generator.
///
/// The latent dimension equals the output dimension; any remaining inputs are
/// conditioning observations and must be supplied through `cond_y`.
pub fn generate_samples(
    model: &MlpModel,
    count: usize,
    cond_y: Option<&[f64]>,
    seed: u64,
) -> Result<Matrix> {
    let d = model.output_dim();
    let q = model
        .input_dim()
        .checked_sub(d)
        .ok_or_else(|| Error::invalid("generator input is smaller than its latent dimension"))?;
    match (q, cond_y) {
        (0, Some(_)) => {
            return Err(Error::invalid(
                "unconditional generator given an observation",
            ))
        }
        (q, None) if q > 0 => {
            return Err(Error::invalid(format!(
                "conditional generator needs an observation of length {q}"
            )))
        }
        (q, Some(y)) if y.len() != q => return Err(Error::dims(q, y.len(), "observation")),
        _ => {}
    }
    let y = cond_y.unwrap_or(&[]);
    let mut out = Matrix::zeros(count, d);
    out.as_mut_slice()
        .par_chunks_mut(d.max(1))
        .enumerate()
        .for_each_init(
            || (Workspace::new(model), vec![0.0; q + d]),
            |(ws, x), (n, o)| {
                x[..q].copy_from_slice(y);
                let z = rng::normal_vec(seed, Purpose::GeneratorLatent, n as u64, d);
                x[q..].copy_from_slice(&z);
                forward_into(model, x, ws, o);
            },
        );
    Ok(out)
}
