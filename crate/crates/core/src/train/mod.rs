//! SGD training with an optional L1 penalty on the ResConv layer scaling
//! factors, plus the toy dataset used for desk-scale experiments.

mod data;
pub mod gradcheck;

pub use data::{gather, make_toy_dataset, ToyDataset, TOY_NOISE};

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::graph::format::{self, FormatError};
use crate::graph::{record, GraphError, Mode, ModelGraph, ParamId, ParamSlot};
use crate::tensor::{ops, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f32,
        /// Graph as of the last completed epoch.
        last_good: Box<ModelGraph>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] FormatError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Normal,
    Sparse,
    Retrain,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Normal => "normal",
            TrainMode::Sparse => "sparse",
            TrainMode::Retrain => "retrain",
        })
    }
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(TrainMode::Normal),
            "sparse" => Ok(TrainMode::Sparse),
            "retrain" => Ok(TrainMode::Retrain),
            _ => Err(TrainError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Optimiser and schedule settings. The learning rate is divided by 10 at
/// one third and two thirds of the epochs. Weight decay applies to every
/// parameter except the ResConv scalars `m` and `g`; `m` is driven by the
/// L1 term alone.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sparsity factor; non-zero only in sparse mode.
    pub lambda: f32,
    pub seed: u64,
    pub mode: TrainMode,
    /// Write a checkpoint every this many epochs (needs `checkpoint_dir`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 30,
            lambda: 0.0,
            seed: 0,
            mode: TrainMode::Normal,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn sparse(lambda: f32) -> Self {
        Self {
            lambda,
            mode: TrainMode::Sparse,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a non-negative number, got {}", self.lambda));
        }
        if self.mode != TrainMode::Sparse && self.lambda != 0.0 {
            return bad(format!("lambda must be 0 in {} mode", self.mode));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("lr must be positive, momentum in [0, 1) and weight decay non-negative".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = (3 * epoch).checked_div(self.epochs).map_or(0, |d| d.min(2));
        self.lr / 10f32.powi(drops as i32)
    }
}

/// `lambda * sum |m|`.
pub fn l1_penalty(m: &[f32], lambda: f32) -> f32 {
    lambda * m.iter().map(|v| v.abs()).sum::<f32>()
}

/// Subgradient of [`l1_penalty`]: `lambda * sign(m)` with `sign(0) = 0`.
pub fn penalty_grad(m: &[f32], lambda: f32) -> Vec<f32> {
    m.iter()
        .map(|&v| if v > 0.0 { lambda } else if v < 0.0 { -lambda } else { 0.0 })
        .collect()
}

/// Mean cross-entropy plus the L1 penalty on `m`.
pub fn sparse_loss(logits: &Tensor, labels: &[usize], m: &[f32], lambda: f32) -> Result<f32, TensorError> {
    Ok(ops::softmax_xent(logits, labels)?.0 + l1_penalty(m, lambda))
}

/// SGD with heavy-ball momentum: `d = grad + wd * p`, `v = mu * v + d`
/// (`v = d` on the first step), `p -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<ParamId, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, id: ParamId, param: &mut [f32], grad: &[f32], lr: f32) {
        let wd = if id.slot.is_block_scalar() { 0.0 } else { self.weight_decay };
        let d = grad.iter().zip(param.iter()).map(|(&g, &p)| g + wd * p);
        match self.velocity.get_mut(&id) {
            Some(v) => {
                for (vi, di) in v.iter_mut().zip(d) {
                    *vi = self.momentum * *vi + di;
                }
            }
            None => {
                self.velocity.insert(id, d.collect());
            }
        }
        let v = &self.velocity[&id];
        for (p, vi) in param.iter_mut().zip(v) {
            *p -= lr * vi;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub loss: f32,
    /// Training accuracy of the epoch's batches, in percent.
    pub acc: f32,
    pub sum_abs_m: f32,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,acc,sum_abs_m\n");
    for h in history {
        let _ = writeln!(s, "{},{},{},{}", h.epoch, h.loss, h.acc, h.sum_abs_m);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub graph: ModelGraph,
    pub history: Vec<EpochStats>,
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `graph` on `data.train_*`. Deterministic for a fixed configuration.
pub fn train(graph: &ModelGraph, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    graph.check_trainable()?;
    let mut g = graph.clone();
    let mut last_good = g.clone();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.train_y.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut batches) = (0.0f64, 0usize, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = gather(&data.train_x, idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let rec = match record(&g, &mut tape, xv, Mode::Train) {
                Err(e) if e.is_non_finite() => {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: bi,
                        loss: f32::NAN,
                        last_good: Box::new(last_good),
                    })
                }
                r => r?,
            };
            let xent = tape.softmax_xent(rec.output, &labels)?;
            let loss = tape.value(xent).data()[0] + l1_penalty(&g.m_values(), cfg.lambda);
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss,
                    last_good: Box::new(last_good),
                });
            }
            hits += correct(tape.value(rec.output), &labels);
            loss_sum += loss as f64;
            batches += 1;
            let mut grads = tape.backward(xent)?;
            for (id, var) in &rec.params {
                let mut grad = grads.take(*var).map_or_else(|| vec![0.0; g.param(*id).map_or(0, <[f32]>::len)], Tensor::into_data);
                if id.slot == ParamSlot::M && cfg.lambda > 0.0 {
                    let m = g.param(*id).expect("recorded parameter exists")[0];
                    grad[0] += penalty_grad(&[m], cfg.lambda)[0];
                }
                let p = g.param_mut(*id).expect("recorded parameter exists");
                sgd.step(*id, p, &grad, lr);
            }
            g.apply_batch_stats(&rec.batch_stats);
            if !g.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: f32::NAN,
                    last_good: Box::new(last_good),
                });
            }
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: (loss_sum / batches.max(1) as f64) as f32,
            acc: 100.0 * hits as f32 / n.max(1) as f32,
            sum_abs_m: g.sum_abs_m(),
        });
        last_good = g.clone();
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                format::save(&g, &dir.join(format!("epoch-{:04}", epoch + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { graph: g, history })
}

/// Fine-tunes a pruned graph with the normal settings and no sparsity term.
pub fn retrain(graph: &ModelGraph, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let cfg = TrainConfig {
        mode: TrainMode::Retrain,
        lambda: 0.0,
        ..cfg.clone()
    };
    train(graph, data, &cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f32,
    /// Percent correct.
    pub acc: f32,
}

/// Inference-mode loss and accuracy over `x`, in batches of `batch`.
pub fn evaluate(g: &ModelGraph, x: &Tensor, labels: &[usize], batch: usize) -> Result<Evaluation, TrainError> {
    let n = labels.len();
    let idx: Vec<usize> = (0..n).collect();
    let (mut loss, mut hits) = (0.0f64, 0usize);
    for chunk in idx.chunks(batch.max(1)) {
        let xb = gather(x, chunk);
        let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let logits = g.forward(&xb, Mode::Infer)?;
        loss += ops::softmax_xent(&logits, &yb)?.0 as f64 * chunk.len() as f64;
        hits += correct(&logits, &yb);
    }
    Ok(Evaluation {
        loss: (loss / n.max(1) as f64) as f32,
        acc: 100.0 * hits as f32 / n.max(1) as f32,
    })
}

pub fn test_accuracy(g: &ModelGraph, data: &ToyDataset) -> Result<f32, TrainError> {
    Ok(evaluate(g, &data.test_x, &data.test_y, 256)?.acc)
}

pub fn train_accuracy(g: &ModelGraph, data: &ToyDataset) -> Result<f32, TrainError> {
    Ok(evaluate(g, &data.train_x, &data.train_y, 256)?.acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_examples() {
        assert!((l1_penalty(&[1.0, -0.5], 0.1) - 0.15).abs() < 1e-7);
        assert_eq!(penalty_grad(&[2.0, -3.0, 0.0], 0.1), vec![0.1, -0.1, 0.0]);
        let logits = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let plain = ops::softmax_xent(&logits, &[0]).unwrap().0;
        assert_eq!(sparse_loss(&logits, &[0], &[5.0], 0.0).unwrap(), plain);
    }

    #[test]
    fn schedule_drops_at_thirds() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(9), 0.1);
        assert_eq!(cfg.lr_at(10), 0.1 / 10.0);
        assert_eq!(cfg.lr_at(29), 0.1 / 100.0);
    }

    #[test]
    fn lambda_requires_sparse_mode() {
        let cfg = TrainConfig {
            lambda: 0.1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::sparse(0.1).validate().is_ok());
    }

    #[test]
    fn momentum_step_matches_hand_rolled() {
        let id = ParamId {
            node: 0,
            slot: ParamSlot::LinearWeight,
        };
        let mut sgd = Sgd::new(0.9, 0.01);
        let mut p = vec![1.0f32, -2.0];
        // Quadratic loss 0.5 * |p|^2, gradient p.
        let (mut q, mut v) = ([1.0f32, -2.0], [0.0f32; 2]);
        for step in 0..3 {
            let grad = p.clone();
            sgd.step(id, &mut p, &grad, 0.1);
            for i in 0..2 {
                let d = q[i] + 0.01 * q[i];
                v[i] = if step == 0 { d } else { 0.9 * v[i] + d };
                q[i] -= 0.1 * v[i];
            }
            assert_eq!(p, q);
        }
    }
}
