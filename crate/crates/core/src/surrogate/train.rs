use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{forward_std, MlpModel, Standardizer, Workspace};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub validation_fraction: f64,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stopping: Option<EarlyStopping>,
    pub seed: u64,
    /// Refit input and output standardization on the training rows.
    pub fit_normalization: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stopping: None,
            seed: 0,
            fit_normalization: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        if let Some(es) = &self.early_stopping {
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) {
                return Err(Error::invalid("validation fraction must lie in (0, 1)"));
            }
            if es.patience == 0 {
                return Err(Error::invalid("patience must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Per-epoch losses in standardized output units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss before each update; the final entry is after the last update.
    pub loss_trace: Vec<f64>,
    pub val_trace: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }
}

struct Scratch {
    ws: Workspace,
    deltas: Vec<Vec<f64>>,
    target: Vec<f64>,
}

impl Scratch {
    fn new(model: &MlpModel) -> Self {
        Self {
            ws: Workspace::new(model),
            deltas: model.layer_dims.iter().map(|&n| vec![0.0; n]).collect(),
            target: vec![0.0; model.output_dim()],
        }
    }
}

/// Mean squared error over rows and outputs, in standardized output units.
pub fn mlp_loss(model: &MlpModel, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    check_shapes(model, inputs, targets)?;
    let rows: Vec<usize> = (0..inputs.rows()).collect();
    let mut s = Scratch::new(model);
    Ok(loss_grad(model, inputs, targets, &rows, None, &mut s))
}

/// Loss together with its gradient in `MlpModel::params` order.
pub fn mlp_loss_and_grad(
    model: &MlpModel,
    inputs: &Matrix,
    targets: &Matrix,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(model, inputs, targets)?;
    let rows: Vec<usize> = (0..inputs.rows()).collect();
    let mut s = Scratch::new(model);
    let mut g = vec![0.0; model.n_params()];
    let l = loss_grad(model, inputs, targets, &rows, Some(&mut g), &mut s);
    Ok((l, g))
}

fn check_shapes(model: &MlpModel, inputs: &Matrix, targets: &Matrix) -> Result<()> {
    if inputs.rows() == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if inputs.rows() != targets.rows() {
        return Err(Error::dims(inputs.rows(), targets.rows(), "target rows"));
    }
    if inputs.cols() != model.input_dim() {
        return Err(Error::dims(
            model.input_dim(),
            inputs.cols(),
            "input columns",
        ));
    }
    if targets.cols() != model.output_dim() {
        return Err(Error::dims(
            model.output_dim(),
            targets.cols(),
            "target columns",
        ));
    }
    Ok(())
}

fn loss_grad(
    model: &MlpModel,
    inputs: &Matrix,
    targets: &Matrix,
    rows: &[usize],
    mut grad: Option<&mut [f64]>,
    s: &mut Scratch,
) -> f64 {
    let n_out = model.output_dim();
    let denom = (rows.len() * n_out) as f64;
    let last = model.n_layers() - 1;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    // parameter offsets of each layer
    let mut offsets = Vec::with_capacity(model.n_layers());
    let mut k = 0;
    for (w, b) in model.weights.iter().zip(&model.biases) {
        offsets.push(k);
        k += w.rows() * w.cols() + b.len();
    }

    let mut total = 0.0;
    for &i in rows {
        model
            .input_norm
            .forward_into(inputs.row(i), &mut s.ws.acts[0]);
        forward_std(model, &mut s.ws);
        model
            .output_norm
            .forward_into(targets.row(i), &mut s.target);
        let out = &s.ws.acts[last + 1];
        for (k, (o, t)) in out.iter().zip(&s.target).enumerate() {
            let e = o - t;
            total += e * e;
            s.deltas[last + 1][k] = 2.0 * e / denom;
        }
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        for l in (0..=last).rev() {
            let w = &model.weights[l];
            let (n_o, n_i) = (w.rows(), w.cols());
            let a_in = &s.ws.acts[l];
            let (lower, upper) = s.deltas.split_at_mut(l + 1);
            let delta = &upper[0];
            let gw = &mut g[offsets[l]..offsets[l] + n_o * n_i];
            for r in 0..n_o {
                let d = delta[r];
                if d != 0.0 {
                    for (gv, a) in gw[r * n_i..(r + 1) * n_i].iter_mut().zip(a_in) {
                        *gv += d * a;
                    }
                }
            }
            let gb = &mut g[offsets[l] + n_o * n_i..offsets[l] + n_o * n_i + n_o];
            for (gv, d) in gb.iter_mut().zip(delta) {
                *gv += d;
            }
            if l > 0 {
                let prev = &mut lower[l];
                let wd = w.as_slice();
                for (c, p) in prev.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for r in 0..n_o {
                        acc += wd[r * n_i + c] * delta[r];
                    }
                    *p = acc * model.activation.slope_from_output(a_in[c]);
                }
            }
        }
    }
    total / denom
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Full-batch Adam on the mean squared error.
///
/// With early stopping, a seeded random subset is held out and the parameters
/// with the lowest validation loss are restored when patience runs out or the
/// epoch budget ends.
pub fn mlp_train(
    mut model: MlpModel,
    inputs: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    check_shapes(&model, inputs, targets)?;
    if !inputs.all_finite() || !targets.all_finite() {
        return Err(Error::invalid("training data contains non-finite values"));
    }

    let m = inputs.rows();
    let (train_rows, val_rows) = match &cfg.early_stopping {
        Some(es) => {
            if m < 2 {
                return Err(Error::invalid("early stopping needs at least two rows"));
            }
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng::stream(cfg.seed, Purpose::ValidationSplit, 0));
            let n_val = ((m as f64 * es.validation_fraction).round() as usize).clamp(1, m - 1);
            let val = idx.split_off(m - n_val);
            (idx, val)
        }
        None => ((0..m).collect::<Vec<_>>(), Vec::new()),
    };

    if cfg.fit_normalization {
        model.input_norm = Standardizer::fit(&inputs.select_rows(&train_rows));
        model.output_norm = Standardizer::fit(&targets.select_rows(&train_rows));
    }

    let mut scratch = Scratch::new(&model);
    let mut params = model.params();
    let mut grad = vec![0.0; params.len()];
    let mut adam = Adam::new(params.len());
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, params.clone());

    for epoch in 0..cfg.epochs {
        let loss = loss_grad(
            &model,
            inputs,
            targets,
            &train_rows,
            Some(&mut grad),
            &mut scratch,
        );
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        report.loss_trace.push(loss);

        if let Some(es) = &cfg.early_stopping {
            let vl = loss_grad(&model, inputs, targets, &val_rows, None, &mut scratch);
            report.val_trace.push(vl);
            if vl < best.0 {
                best = (vl, params.clone());
                report.best_epoch = epoch;
            } else if epoch - report.best_epoch >= es.patience {
                report.stopped_early = true;
                debug!("early stop at epoch {epoch}, best {}", report.best_epoch);
                break;
            }
        }
        if epoch % 1000 == 0 {
            debug!("epoch {epoch}: loss {loss:.3e}");
        }

        adam.step(&mut params, &grad, cfg);
        model.set_params(&params)?;
    }

    if cfg.early_stopping.is_some() {
        let vl = loss_grad(&model, inputs, targets, &val_rows, None, &mut scratch);
        if vl < best.0 {
            report.best_epoch = report.val_trace.len();
        } else {
            model.set_params(&best.1)?;
        }
    } else {
        report.best_epoch = cfg.epochs;
    }
    let final_loss = loss_grad(&model, inputs, targets, &train_rows, None, &mut scratch);
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: report.loss_trace.len(),
        });
    }
    report.loss_trace.push(final_loss);
    Ok((model, report))
}

/// Largest relative discrepancy between backprop and central differences
/// (step 1e-5) over all parameters, for the loss at one `(x, target)` pair.
/// Gradient entries below 1e-5 in magnitude are compared absolutely.
pub fn mlp_gradient_check(model: &MlpModel, x: &[f64], target: &[f64]) -> Result<f64> {
    let inputs = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let targets = Matrix::from_vec(1, target.len(), target.to_vec())?;
    let (_, g) = mlp_loss_and_grad(model, &inputs, &targets)?;
    let h = 1e-5;
    let base = model.params();
    let mut probe = model.clone();
    let mut p = base.clone();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        p[k] = base[k] + h;
        probe.set_params(&p)?;
        let up = mlp_loss(&probe, &inputs, &targets)?;
        p[k] = base[k] - h;
        probe.set_params(&p)?;
        let down = mlp_loss(&probe, &inputs, &targets)?;
        p[k] = base[k];
        let fd = (up - down) / (2.0 * h);
        let scale = g[k].abs().max(fd.abs()).max(1e-5);
        worst = worst.max((g[k] - fd).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::{mlp_forward, mlp_init, Activation};
    use super::*;
    use proptest::prelude::*;

    fn linear_data(n: usize) -> (Matrix, Matrix) {
        let xs: Vec<f64> = (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        (Matrix::column_vector(&xs), Matrix::column_vector(&ys))
    }

    #[test]
    fn gradient_check_random_networks() {
        for seed in 0..5 {
            let mut m = mlp_init(&[3, 8, 5, 2], Activation::Tanh, seed).unwrap();
            let mut p = m.params();
            for (k, v) in p.iter_mut().enumerate() {
                *v += 0.05 * ((k as f64) * 0.37 + seed as f64).sin();
            }
            m.set_params(&p).unwrap();
            m.input_norm.shift = vec![0.1, -0.2, 0.3];
            m.output_norm.scale = vec![2.0, 0.5];
            let err = mlp_gradient_check(&m, &[0.3, -0.8, 1.2], &[0.5, -1.0]).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        let m = mlp_init(&[2, 6, 1], Activation::Tanh, 3).unwrap();
        let x = [0.2, 0.9];
        let t = mlp_forward(&m, &x).unwrap();
        let inputs = Matrix::from_rows(&[x]).unwrap();
        let targets = Matrix::from_rows(&[t.clone()]).unwrap();
        let (l, g) = mlp_loss_and_grad(&m, &inputs, &targets).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert!(mlp_gradient_check(&m, &x, &t).unwrap() < 1e-4);
    }

    #[test]
    fn single_neuron_closed_form() {
        let mut m = mlp_init(&[1, 1], Activation::Tanh, 0).unwrap();
        let (w, x, t) = (0.7, 1.5, 0.2);
        m.set_params(&[w, 0.0]).unwrap();
        let inputs = Matrix::column_vector(&[x]);
        let targets = Matrix::column_vector(&[t]);
        let (l, g) = mlp_loss_and_grad(&m, &inputs, &targets).unwrap();
        assert!((l - (w * x - t).powi(2)).abs() < 1e-15);
        assert!((g[0] - 2.0 * x * (w * x - t)).abs() < 1e-15);
        assert!((g[1] - 2.0 * (w * x - t)).abs() < 1e-15);
    }

    #[test]
    fn fits_linear_function() {
        let (x, y) = linear_data(100);
        let m = mlp_init(&[1, 20, 1], Activation::Tanh, 1).unwrap();
        let (m, rep) = mlp_train(m, &x, &y, &TrainConfig::default()).unwrap();
        assert!(rep.final_loss() <= rep.initial_loss());
        let worst = x
            .iter_rows()
            .zip(y.iter_rows())
            .map(|(xi, yi)| (mlp_forward(&m, xi).unwrap()[0] - yi[0]).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-2, "{worst}");

        // 100-epoch averages never rise until Adam reaches its jitter floor,
        // and 1000-epoch averages never rise at all
        let means = |w: usize| -> Vec<f64> {
            rep.loss_trace[..10_000]
                .chunks(w)
                .map(|c| c.iter().sum::<f64>() / w as f64)
                .collect()
        };
        for p in means(100).windows(2).filter(|p| p[0] > 1e-6) {
            assert!(p[1] <= p[0], "{} > {}", p[1], p[0]);
        }
        for p in means(1000).windows(2) {
            assert!(p[1] < p[0], "{} >= {}", p[1], p[0]);
        }
    }

    #[test]
    fn fits_constant_target() {
        let (x, _) = linear_data(50);
        let y = Matrix::column_vector(&[1.7; 50]);
        let m = mlp_init(&[1, 20, 1], Activation::Tanh, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2000,
            ..Default::default()
        };
        let (m, _) = mlp_train(m, &x, &y, &cfg).unwrap();
        let mse = x
            .iter_rows()
            .map(|xi| (mlp_forward(&m, xi).unwrap()[0] - 1.7).powi(2))
            .sum::<f64>()
            / 50.0;
        assert!(mse < 1e-6, "{mse}");
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = linear_data(30);
        let cfg = TrainConfig {
            epochs: 200,
            early_stopping: Some(EarlyStopping {
                validation_fraction: 0.2,
                patience: 50,
            }),
            seed: 4,
            ..Default::default()
        };
        let a = mlp_train(
            mlp_init(&[1, 5, 1], Activation::Tanh, 1).unwrap(),
            &x,
            &y,
            &cfg,
        )
        .unwrap();
        let b = mlp_train(
            mlp_init(&[1, 5, 1], Activation::Tanh, 1).unwrap(),
            &x,
            &y,
            &cfg,
        )
        .unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn early_stopping_triggers_on_flat_validation() {
        // targets are pure alternating noise: validation loss cannot keep improving
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let ys: Vec<f64> = (0..40)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let cfg = TrainConfig {
            epochs: 20_000,
            learning_rate: 1e-2,
            early_stopping: Some(EarlyStopping {
                validation_fraction: 0.25,
                patience: 100,
            }),
            seed: 1,
            ..Default::default()
        };
        let m = mlp_init(&[1, 20, 1], Activation::Tanh, 0).unwrap();
        let (_, rep) = mlp_train(
            m,
            &Matrix::column_vector(&xs),
            &Matrix::column_vector(&ys),
            &cfg,
        )
        .unwrap();
        assert!(rep.stopped_early);
        assert!(rep.val_trace.len() < 20_000);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let (x, y) = linear_data(10);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e300,
            ..Default::default()
        };
        let m = mlp_init(&[1, 4, 1], Activation::Tanh, 0).unwrap();
        match mlp_train(m, &x, &y, &cfg) {
            Err(Error::TrainingDiverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            early_stopping: Some(EarlyStopping {
                validation_fraction: 1.0,
                patience: 3,
            }),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            early_stopping: Some(EarlyStopping {
                validation_fraction: 0.2,
                patience: 0,
            }),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn gradients_agree_with_finite_differences(seed in 0u64..1000, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let m = mlp_init(&[2, 6, 2], Activation::Tanh, seed).unwrap();
            let err = mlp_gradient_check(&m, &[a, b], &[b, -a]).unwrap();
            prop_assert!(err < 1e-4);
        }
    }
}
