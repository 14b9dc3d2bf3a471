//! Dense ReLU network with a softmax cross-entropy head, trained by seeded
//! mini-batch SGD. Parameters live in float64 while training and are
//! rounded to float32 when exported as a checkpoint.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor_store::{Checkpoint, TensorRecord};

use super::data::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_dims: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let mut z = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                z += w * xi;
            }
            out.push(z);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Full-training-set objective after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn weight_name(i: usize) -> String {
    format!("layers.{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("layers.{i}.bias")
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "init");
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                Dense {
                    inputs: w[0],
                    outputs: w[1],
                    // round through f32 so init equals its own checkpoint
                    weight: (0..w[0] * w[1])
                        .map(|_| ((std * rng.sample::<f64, _>(StandardNormal)) as f32) as f64)
                        .collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(w) = ckpt.get(&weight_name(layers.len())) {
            let i = layers.len();
            let [outputs, inputs] = *w.shape() else {
                return Err(Error::InvalidTensor {
                    name: w.name().to_string(),
                    reason: format!("expected a rank-2 weight, got shape {:?}", w.shape()),
                });
            };
            let b = ckpt.get(&bias_name(i)).ok_or_else(|| Error::MissingTensor {
                name: bias_name(i),
                present_in: "network layout",
                missing_from: "checkpoint",
            })?;
            if b.shape() != [outputs] {
                return Err(Error::ShapeMismatch {
                    name: bias_name(i),
                    left: vec![outputs],
                    right: b.shape().to_vec(),
                });
            }
            if let Some(prev) = layers.last() {
                let prev: &Dense = prev;
                if prev.outputs != inputs {
                    return Err(Error::InvalidTensor {
                        name: w.name().to_string(),
                        reason: format!("takes {inputs} inputs but the previous layer emits {}", prev.outputs),
                    });
                }
            }
            layers.push(Dense {
                inputs,
                outputs,
                weight: w.data().iter().map(|&v| v as f64).collect(),
                bias: b.data().iter().map(|&v| v as f64).collect(),
            });
        }
        if layers.is_empty() {
            return Err(Error::MissingTensor {
                name: weight_name(0),
                present_in: "network layout",
                missing_from: "checkpoint",
            });
        }
        if ckpt.len() != 2 * layers.len() {
            return Err(Error::InvalidTensor {
                name: ckpt
                    .tensors()
                    .iter()
                    .map(TensorRecord::name)
                    .find(|n| !(0..layers.len()).any(|i| *n == weight_name(i) || *n == bias_name(i)))
                    .unwrap_or("?")
                    .to_string(),
                reason: "not part of the dense network layout".into(),
            });
        }
        Ok(Mlp { layers })
    }

    pub fn to_checkpoint(&self, metadata: BTreeMap<String, String>) -> Checkpoint {
        let tensors = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    TensorRecord::new(weight_name(i), vec![l.outputs, l.inputs], l.weight.iter().map(|&v| v as f32).collect()),
                    TensorRecord::new(bias_name(i), vec![l.outputs], l.bias.iter().map(|&v| v as f32).collect()),
                ]
            })
            .collect::<Result<Vec<_>>>()
            .expect("layer shapes are consistent by construction");
        Checkpoint::new(tensors, metadata).expect("layer names are unique")
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut a: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut z = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.forward(&a, &mut z);
            if i + 1 < self.layers.len() {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut a, &mut z);
        }
        a
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.input_dim != self.input_dim() || ds.num_classes != self.num_classes() {
            return Err(Error::ShapeMismatch {
                name: format!("dataset `{}`", ds.task_id),
                left: vec![self.input_dim(), self.num_classes()],
                right: vec![ds.input_dim, ds.num_classes],
            });
        }
        Ok(())
    }

    /// Mean cross-entropy plus `weight_decay / 2 * Σ w²` over weight matrices.
    pub fn objective(&self, ds: &Dataset, rows: &[usize], weight_decay: f64) -> f64 {
        let ce: f64 = rows.iter().map(|&r| cross_entropy(&self.logits(ds.row(r)), ds.labels[r] as usize)).sum();
        ce / rows.len() as f64 + 0.5 * weight_decay * self.weight_sq_norm()
    }

    fn weight_sq_norm(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.weight.iter()).map(|w| w * w).sum()
    }

    /// Objective and its gradient over `rows`, gradients laid out like
    /// `self.layers`.
    pub fn objective_and_grad(&self, ds: &Dataset, rows: &[usize], weight_decay: f64) -> (f64, Vec<Dense>) {
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense {
                inputs: l.inputs,
                outputs: l.outputs,
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        let depth = self.layers.len();
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
        let mut loss = 0.0;
        for &r in rows {
            acts[0].clear();
            acts[0].extend(ds.row(r).iter().map(|&v| v as f64));
            for (i, l) in self.layers.iter().enumerate() {
                let (lo, hi) = acts.split_at_mut(i + 1);
                l.forward(&lo[i], &mut hi[0]);
                if i + 1 < depth {
                    for v in hi[0].iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            let label = ds.labels[r] as usize;
            let probs = softmax(&acts[depth]);
            loss += -probs[label].max(f64::MIN_POSITIVE).ln();
            let mut delta: Vec<f64> = probs;
            delta[label] -= 1.0;
            for i in (0..depth).rev() {
                let l = &self.layers[i];
                let g = &mut grads[i];
                let input = &acts[i];
                for o in 0..l.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    let row = &mut g.weight[o * l.inputs..(o + 1) * l.inputs];
                    for (gw, &x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
                if i > 0 {
                    let mut prev = vec![0.0; l.inputs];
                    for o in 0..l.outputs {
                        let d = delta[o];
                        let row = &l.weight[o * l.inputs..(o + 1) * l.inputs];
                        for (p, &w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                    // ReLU derivative from the stored post-activation
                    for (p, &a) in prev.iter_mut().zip(&acts[i]) {
                        if a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        let n = rows.len() as f64;
        for (g, l) in grads.iter_mut().zip(&self.layers) {
            for (gw, w) in g.weight.iter_mut().zip(&l.weight) {
                *gw = *gw / n + weight_decay * w;
            }
            for gb in g.bias.iter_mut() {
                *gb /= n;
            }
        }
        (loss / n + 0.5 * weight_decay * self.weight_sq_norm(), grads)
    }

    fn sgd_step(&mut self, grads: &[Dense], lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(grads) {
            for (w, gw) in l.weight.iter_mut().zip(&g.weight) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Runs `cfg.epochs` epochs of mini-batch SGD. Epoch `e` shuffles with a
    /// stream keyed by `(cfg.seed, e)`.
    pub fn train(&mut self, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
        cfg.validate()?;
        self.check_dataset(ds)?;
        if ds.is_empty() {
            return Err(Error::InvalidConfig(format!("dataset `{}` is empty", ds.task_id)));
        }
        let all: Vec<usize> = (0..ds.len()).collect();
        let mut log = TrainLog::default();
        for epoch in 0..cfg.epochs {
            let mut order = all.clone();
            order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/{epoch}")));
            for batch in order.chunks(cfg.batch_size) {
                let (_, grads) = self.objective_and_grad(ds, batch, cfg.weight_decay);
                self.sgd_step(&grads, cfg.learning_rate);
            }
            let loss = self.objective(ds, &all, cfg.weight_decay);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            log.epoch_losses.push(loss);
        }
        Ok(log)
    }

    /// Fraction of rows whose argmax prediction equals the label.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        self.check_dataset(ds)?;
        if ds.is_empty() {
            return Err(Error::InvalidConfig(format!("dataset `{}` is empty", ds.task_id)));
        }
        let correct = (0..ds.len()).filter(|&r| self.predict(ds.row(r)) == ds.labels[r] as usize).count();
        Ok(correct as f64 / ds.len() as f64)
    }
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub params_checked: usize,
    pub max_relative_error: f64,
    /// `layers.{i}.weight[j]` style name of the worst parameter.
    pub worst: String,
}

fn param_mut(m: &mut Mlp, layer: usize, is_bias: bool, j: usize) -> &mut f64 {
    let l = &mut m.layers[layer];
    if is_bias {
        &mut l.bias[j]
    } else {
        &mut l.weight[j]
    }
}

/// Compares every analytic partial derivative of the objective over `rows`
/// against `(f(p + h) - f(p - h)) / 2h`. Relative error uses
/// `max(|analytic|, |numeric|, floor)` as the denominator.
pub fn gradient_check(net: &Mlp, ds: &Dataset, rows: &[usize], weight_decay: f64, h: f64, floor: f64) -> GradientCheck {
    let (_, grads) = net.objective_and_grad(ds, rows, weight_decay);
    let mut probe = net.clone();
    let mut out = GradientCheck { params_checked: 0, max_relative_error: 0.0, worst: String::new() };
    for li in 0..net.layers.len() {
        for is_bias in [false, true] {
            let len = if is_bias { net.layers[li].bias.len() } else { net.layers[li].weight.len() };
            for j in 0..len {
                let orig = *param_mut(&mut probe, li, is_bias, j);
                *param_mut(&mut probe, li, is_bias, j) = orig + h;
                let up = probe.objective(ds, rows, weight_decay);
                *param_mut(&mut probe, li, is_bias, j) = orig - h;
                let down = probe.objective(ds, rows, weight_decay);
                *param_mut(&mut probe, li, is_bias, j) = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = if is_bias { grads[li].bias[j] } else { grads[li].weight[j] };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                out.params_checked += 1;
                if rel > out.max_relative_error || out.worst.is_empty() {
                    out.max_relative_error = rel;
                    out.worst = format!("{}[{j}]", if is_bias { bias_name(li) } else { weight_name(li) });
                }
            }
        }
    }
    out
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn train_meta(role: &str, cfg: &TrainConfig, ds: &Dataset) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("source".to_string(), format!("fixture {role}"));
    m.insert("seed".to_string(), cfg.seed.to_string());
    m.insert("dataset".to_string(), ds.task_id.clone());
    m.insert("epochs".to_string(), cfg.epochs.to_string());
    m
}

/// Trains a fresh network on `ds`.
pub fn pretrain(ds: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let mut net = Mlp::init(ds.input_dim, &cfg.hidden_dims, ds.num_classes, cfg.seed);
    let log = net.train(ds, cfg)?;
    Ok((net.to_checkpoint(train_meta("pretrain", cfg, ds)), log))
}

/// Continues training from `base`. `cfg.hidden_dims` must describe the
/// architecture stored in `base`.
pub fn finetune(base: &Checkpoint, ds: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let mut net = Mlp::from_checkpoint(base)?;
    let hidden: Vec<usize> = net.layers[..net.layers.len() - 1].iter().map(|l| l.outputs).collect();
    if hidden != cfg.hidden_dims {
        return Err(Error::InvalidConfig(format!(
            "base network has hidden widths {hidden:?}, config expects {:?}",
            cfg.hidden_dims
        )));
    }
    let log = net.train(ds, cfg)?;
    Ok((net.to_checkpoint(train_meta("finetune", cfg, ds)), log))
}

/// Accuracy of `model` on `ds`.
pub fn evaluate(model: &Checkpoint, ds: &Dataset) -> Result<f64> {
    Mlp::from_checkpoint(model)?.accuracy(ds)
}
