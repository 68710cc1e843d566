//! AdamW with linear warmup/decay, cross-entropy, and the seeded training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::{Grads, Mode, Model, TensorKind};
use crate::tasks::{evaluate, Example, Metrics};

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            batch_size: 32,
            epochs: 5,
            warmup_ratio: Some(0.06),
            warmup_steps: None,
            weight_decay: 0.0,
            label_smoothing: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Checks everything except the sign of the learning rate.
    fn validate_shape(&self) -> Result<()> {
        if self.warmup_ratio.is_some() == self.warmup_steps.is_some() {
            return Err(config_err("set exactly one of warmup_ratio and warmup_steps"));
        }
        if let Some(r) = self.warmup_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(config_err(format!("warmup_ratio must be in [0, 1), got {r}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err("batch_size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err("label_smoothing must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(config_err("eps must be positive; weight_decay and learning_rate non-negative"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(config_err("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if !(self.learning_rate > 0.0) {
            return Err(config_err("learning_rate must be positive"));
        }
        Ok(())
    }

    /// Optimizer steps for `n_examples` training examples.
    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.batch_size)
    }

    /// Warmup length in steps; a ratio is rounded to the nearest step.
    pub fn warmup_end(&self, total_steps: usize) -> usize {
        match (self.warmup_steps, self.warmup_ratio) {
            (Some(s), _) => s.min(total_steps),
            (None, Some(r)) => ((r * total_steps as f64).round() as usize).min(total_steps),
            (None, None) => 0,
        }
    }
}

/// Linear warmup from 0 to the peak rate, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let warm = config.warmup_end(total_steps);
    let step = step.min(total_steps);
    if step < warm {
        lr * step as f64 / warm as f64
    } else if total_steps == warm {
        lr
    } else {
        lr * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One AdamW update of a single tensor. `t` is the 1-based step used for bias
/// correction.
pub fn adamw_update(
    param: &mut Matrix,
    grad: &Matrix,
    moments: &mut Moments,
    config: &TrainConfig,
    lr_t: f64,
    t: u64,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || moments.m.shape() != grad.shape() || moments.v.shape() != grad.shape() {
        return Err(Error::Shape {
            op: "adamw",
            lhs: param.shape(),
            rhs: grad.shape(),
        });
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let shrink = if decay { 1.0 - lr_t * config.weight_decay } else { 1.0 };
    let p = param.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        p[i] *= shrink;
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr_t * m_hat / (v_hat.sqrt() + config.eps);
    }
    param.check_finite("adamw")
}

/// Applies one AdamW step to every tensor that has a gradient. Only
/// trainable tensors are touched; decay skips norms and biases.
pub fn adamw_step(model: &mut Model, grads: &Grads, state: &mut OptimState, config: &TrainConfig, lr_t: f64) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let trainable: Vec<bool> = grads.keys().map(|n| model.is_trainable(n)).collect();
    if let Some((name, _)) = grads.keys().zip(&trainable).find(|(_, ok)| !**ok) {
        return Err(Error::State(format!("gradient supplied for frozen tensor {name}")));
    }
    let mut seen = 0;
    model.for_each_tensor_mut(|name, param| {
        let Some(g) = grads.get(name) else { return Ok(()) };
        seen += 1;
        let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Matrix::zeros(g.rows(), g.cols()),
            v: Matrix::zeros(g.rows(), g.cols()),
        });
        adamw_update(param, g, mom, config, lr_t, t, TensorKind::of(name).decays())
    })?;
    if seen != grads.len() {
        return Err(Error::State("gradient for unknown tensor".into()));
    }
    Ok(())
}

/// Mean softmax cross-entropy over columns of `logits` (`classes × batch`)
/// with uniform label smoothing. Returns the loss and its gradient.
pub fn cross_entropy(logits: &Matrix, targets: &[usize], smoothing: f64) -> Result<(f64, Matrix)> {
    let (k, n) = logits.shape();
    if targets.len() != n {
        return Err(Error::Input(format!("{} targets for {n} logit columns", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Input(format!("target {bad} out of range for {k} classes")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Input(format!("smoothing must be in [0, 1), got {smoothing}")));
    }
    let mut grad = Matrix::zeros(k, n);
    let mut total = 0.0;
    let off = smoothing / k as f64;
    for (j, &target) in targets.iter().enumerate() {
        let max = (0..k).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = (0..k).map(|i| (logits.get(i, j) - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        for i in 0..k {
            let q = off + if i == target { 1.0 - smoothing } else { 0.0 };
            let logp = logits.get(i, j) - log_z;
            total -= q * logp;
            grad.set(i, j, (logp.exp() - q) / n as f64);
        }
    }
    grad.check_finite("cross_entropy")?;
    Ok((total / n as f64, grad))
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRecord>,
    /// Validation metrics after each epoch.
    pub epoch_metrics: Vec<Metrics>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Epoch (0-based) whose weights the model holds on return.
    pub best_epoch: usize,
}

/// Which validation metric selects the kept epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrimaryMetric {
    #[default]
    Mcc,
    Accuracy,
}

impl PrimaryMetric {
    pub fn pick(self, m: &Metrics) -> f64 {
        match self {
            PrimaryMetric::Mcc => m.mcc,
            PrimaryMetric::Accuracy => m.accuracy,
        }
    }
}

/// Random streams used by one run, all derived from a single seed.
pub struct RunStreams {
    pub data_order: Rng,
    pub dropout: Rng,
}

impl RunStreams {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const ADAPTER_INIT: u64 = 2;
    pub const DATA_ORDER: u64 = 3;
    pub const DROPOUT: u64 = 4;

    pub fn new(seed: u64) -> Self {
        Self {
            data_order: Rng::stream(seed, Self::DATA_ORDER),
            dropout: Rng::stream(seed, Self::DROPOUT),
        }
    }
}

fn global_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Trains `model` on `train`, evaluating on `val` after every epoch. On
/// return the model holds the weights of the best epoch by `primary`.
///
/// A learning rate of zero is accepted here and leaves every tensor
/// untouched. A non-finite loss aborts with [`Error::Numeric`].
pub fn train_loop(
    model: &mut Model,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    primary: PrimaryMetric,
    streams: &mut RunStreams,
    mut on_record: impl FnMut(&TraceRecord) -> Result<()>,
) -> Result<TrainReport> {
    config.validate_shape()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let total = config.total_steps(train.len());
    let mut state = OptimState::default();
    let mut trace = Vec::new();
    let mut epoch_metrics = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        streams.data_order.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].tokens.clone()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let fwd = model.forward(&batch, Mode::Train(&mut streams.dropout))?;
            let (loss, dlogits) = cross_entropy(&fwd.logits, &targets, config.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}, epoch {epoch}")));
            }
            let mut grads = model.backward(&fwd.cache, &dlogits)?;
            if let Some(max_norm) = config.max_grad_norm {
                let norm = global_norm(&grads);
                if norm > max_norm {
                    let s = max_norm / norm;
                    for g in grads.values_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            let lr = lr_at(step, total, config);
            adamw_step(model, &grads, &mut state, config, lr)?;
            let rec = TraceRecord {
                step,
                epoch,
                lr,
                loss,
                eval: None,
            };
            on_record(&rec)?;
            trace.push(rec);
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let metrics = evaluate(model, val, config.batch_size.max(64))?;
        let mean_loss = loss_sum / batches as f64;
        let rec = TraceRecord {
            step,
            epoch,
            lr: lr_at(step, total, config),
            loss: mean_loss,
            eval: Some(metrics),
        };
        on_record(&rec)?;
        trace.push(rec);
        epoch_metrics.push(metrics);
        epoch_loss.push(mean_loss);
        let score = primary.pick(&metrics);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    *model = best_model;
    Ok(TrainReport {
        trace,
        epoch_metrics,
        epoch_loss,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_points() {
        let c = cfg();
        assert_eq!(c.warmup_end(1000), 60);
        assert_eq!(lr_at(0, 1000, &c), 0.0);
        assert_eq!(lr_at(60, 1000, &c), c.learning_rate);
        assert_eq!(lr_at(530, 1000, &c), c.learning_rate * (1000.0 - 530.0) / (1000.0 - 60.0));
        assert_eq!(lr_at(1000, 1000, &c), 0.0);
        assert_eq!(lr_at(30, 1000, &c), c.learning_rate * 0.5);
        let steps = TrainConfig {
            warmup_ratio: None,
            warmup_steps: Some(500),
            ..cfg()
        };
        assert_eq!(lr_at(250, 2000, &steps), steps.learning_rate * 0.5);
    }

    #[test]
    fn warmup_exclusivity() {
        let both = TrainConfig {
            warmup_steps: Some(10),
            ..cfg()
        };
        assert!(both.validate().is_err());
        let neither = TrainConfig {
            warmup_ratio: None,
            ..cfg()
        };
        assert!(neither.validate().is_err());
        let zero_lr = TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        };
        assert!(zero_lr.validate().is_err());
        assert!(zero_lr.validate_shape().is_ok());
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_keeps_params() {
        let mut p = scalar(0.7);
        let mut mom = Moments { m: scalar(0.0), v: scalar(0.0) };
        for t in 1..=3 {
            adamw_update(&mut p, &scalar(0.0), &mut mom, &cfg(), 1e-2, t, true).unwrap();
        }
        assert_eq!(p.get(0, 0), 0.7);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let c = TrainConfig {
            weight_decay: 0.01,
            ..cfg()
        };
        let mut p = scalar(2.0);
        let mut mom = Moments { m: scalar(0.0), v: scalar(0.0) };
        let lr = 0.1;
        adamw_update(&mut p, &scalar(0.0), &mut mom, &c, lr, 1, true).unwrap();
        assert_eq!(p.get(0, 0), 2.0 * (1.0 - lr * 0.01));
        let mut q = scalar(2.0);
        adamw_update(&mut q, &scalar(0.0), &mut mom, &c, lr, 2, false).unwrap();
        assert_eq!(q.get(0, 0), 2.0);
    }

    #[test]
    fn scalar_trace_matches_hand_rolled_adamw() {
        let c = cfg();
        let lr = 1e-3;
        // independent scalar recurrence
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            expected.push(theta);
        }
        let mut p = scalar(0.5);
        let mut mom = Moments { m: scalar(0.0), v: scalar(0.0) };
        for (t, want) in (1..=3).zip(&expected) {
            adamw_update(&mut p, &scalar(1.0), &mut mom, &c, lr, t as u64, true).unwrap();
            assert!((p.get(0, 0) - want).abs() <= 1e-12);
        }
        // first step moves by about -lr * sign(g)
        assert!((expected[0] - (0.5 - lr)).abs() < 1e-8);
    }

    #[test]
    fn adamw_rejects_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut mom = Moments { m: Matrix::zeros(2, 2), v: Matrix::zeros(2, 2) };
        assert!(adamw_update(&mut p, &Matrix::zeros(2, 1), &mut mom, &cfg(), 0.1, 1, true).is_err());
    }

    #[test]
    fn equal_betas_stay_finite() {
        let c = TrainConfig {
            beta1: 0.9,
            beta2: 0.9,
            ..cfg()
        };
        let mut p = scalar(1.0);
        let mut mom = Moments { m: scalar(0.0), v: scalar(0.0) };
        for t in 1..=5 {
            adamw_update(&mut p, &scalar(if t % 2 == 0 { 0.0 } else { 1e-30 }), &mut mom, &c, 0.1, t, false).unwrap();
        }
        assert!(p.get(0, 0).is_finite());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Matrix::zeros(4, 3);
        let (loss, _) = cross_entropy(&uniform, &[0, 1, 3], 0.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);

        let confident = Matrix::from_rows(&[&[100.0], &[0.0]]).unwrap();
        let (loss, _) = cross_entropy(&confident, &[0], 0.0).unwrap();
        assert!(loss < 1e-40);

        // smoothing 0.1, 4 classes, direct summation
        let logits = Matrix::from_rows(&[&[1.0], &[2.0], &[0.5], &[-1.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[1], 0.1).unwrap();
        let z: f64 = [1.0f64, 2.0, 0.5, -1.0].iter().map(|v| v.exp()).sum();
        let q = [0.025, 0.925, 0.025, 0.025];
        let direct: f64 = -[1.0f64, 2.0, 0.5, -1.0]
            .iter()
            .zip(q)
            .map(|(l, qi)| qi * (l.exp() / z).ln())
            .sum::<f64>();
        assert!((loss - direct).abs() < 1e-12);

        assert!(cross_entropy(&logits, &[4], 0.0).is_err());
        assert!(cross_entropy(&logits, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let mut rng = Rng::new(3);
        let logits = crate::linalg::gaussian(&mut rng, 4, 3, 2.0).unwrap();
        let targets = [2, 0, 3];
        let (_, grad) = cross_entropy(&logits, &targets, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut plus = logits.clone();
                plus.set(i, j, logits.get(i, j) + h);
                let mut minus = logits.clone();
                minus.set(i, j, logits.get(i, j) - h);
                let fd = (cross_entropy(&plus, &targets, 0.1).unwrap().0 - cross_entropy(&minus, &targets, 0.1).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad.get(i, j)).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
