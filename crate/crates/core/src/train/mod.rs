//! Optimizer, training loop, multi-stage grid schedule, metrics and
//! checkpoints.

mod checkpoint;
mod metrics;
mod optim;
mod pls;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, LoadReport, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{metrics_csv, write_metrics_csv, Confusion, MetricRow, METRICS_HEADER};
pub use optim::{learning_rate, LrSchedule, Sgd, SgdConfig};
pub use pls::{prepare_stage, run_pls, PlsReport, PlsSchedule, StageReport};

use crate::error::{Error, Result};
use crate::network::{Mode, Model};
use crate::skeleton::{Dataset, Split};
use crate::tensor::{DType, Graph, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Epochs at which the step schedule decays.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Separate rate for the transform matrices; `None` shares `lr`.
    pub transform_lr: Option<f64>,
    /// Every clip is brought to this many frames.
    pub frames: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Stops a stage after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            epochs: 30,
            batch_size: 16,
            lr_schedule: LrSchedule::Cosine,
            milestones: vec![10, 50],
            lr_decay: 0.1,
            transform_lr: None,
            frames: 32,
            seed: 0,
            dtype: DType::F32,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.transform_lr.is_some_and(|v| !finite_nonneg(v)) {
            return Err(Error::config("train.transform_lr must be non-negative"));
        }
        if !finite_nonneg(self.momentum) || !finite_nonneg(self.weight_decay) || !finite_nonneg(self.lr_decay) {
            return Err(Error::config("train.momentum, weight_decay and lr_decay must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.frames == 0 {
            return Err(Error::config("train.frames must be at least 1"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay, nesterov: self.nesterov }
    }

    fn rate(&self, epoch: usize, step: usize, total: usize, transform: bool) -> f64 {
        let base = match (transform, self.transform_lr) {
            (true, Some(lr)) => lr,
            _ => self.lr,
        };
        learning_rate(base, self.lr_schedule, &self.milestones, self.lr_decay, epoch, step, total)
    }
}

fn is_transform(name: &str) -> bool {
    name.starts_with("stage")
}

/// Top-1 accuracy, mean loss and confusion counts of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub loss: f64,
    pub confusion: Confusion,
    pub predictions: Vec<usize>,
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Runs the model in evaluation mode (running batch-norm statistics,
/// cached assignments) over one split.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    split: Split,
    frames: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    let idx = ds.split(split);
    if idx.is_empty() {
        return Err(Error::config(format!("the {split} split is empty")));
    }
    let k = ds.n_classes();
    let mut confusion = Confusion::new(k);
    let mut predictions = Vec::with_capacity(idx.len());
    let mut loss_sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch::<T>(chunk, frames)?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let logits = model.forward(&mut g, xv, Mode::Eval)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
        let out = g.value(logits);
        let classes = out.dim(1);
        for (b, &truth) in labels.iter().enumerate() {
            let p = argmax(&out.data()[b * classes..][..classes]);
            confusion.record(truth, p);
            predictions.push(p);
        }
    }
    Ok(EvalReport { top1: confusion.accuracy(), loss: loss_sum / idx.len() as f64, confusion, predictions })
}

/// Minibatch SGD over cross-entropy for `cfg.epochs` epochs (or until
/// `cfg.max_steps`). Records train loss/accuracy and validation loss/top-1
/// per epoch; `on_row` sees every row as it is produced.
pub fn train_stage<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&MetricRow),
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let train_idx = ds.split(Split::Train).to_vec();
    if train_idx.is_empty() {
        return Err(Error::config("the train split is empty"));
    }
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.map_or(steps_per_epoch * cfg.epochs, |m| m.min(steps_per_epoch * cfg.epochs));
    let sgd_cfg = cfg.sgd();
    let mut sgd = Sgd::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut correct = 0;
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total {
                break;
            }
            let diverged = |e: Error| match e {
                Error::NonFinite(msg) => Error::Diverged { epoch: epoch + 1, step: s + 1, msg },
                other => other,
            };
            let (x, labels) = ds.batch::<T>(chunk, cfg.frames)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = model.forward(&mut g, xv, Mode::Train).map_err(diverged)?;
            let loss = g.softmax_cross_entropy(logits, &labels).map_err(diverged)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, step: s + 1, msg: format!("loss is {lv}") });
            }
            let out = g.value(logits);
            let classes = out.dim(1);
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(b, &t)| argmax(&out.data()[b * classes..][..classes]) == t)
                .count();
            let grads = g.backward(loss).map_err(diverged)?;
            let (net_lr, tf_lr) = (cfg.rate(epoch, step, total, false), cfg.rate(epoch, step, total, true));
            sgd.step(model.trainable_mut(), &grads, &sgd_cfg, |n| if is_transform(n) { tf_lr } else { net_lr })
                .map_err(diverged)?;
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let train_row =
            MetricRow { epoch: epoch + 1, split: Split::Train, loss: loss_sum / seen as f64, top1: correct as f64 / seen as f64 };
        on_row(&train_row);
        history.push(train_row);
        if let Some(c) = &mut model.cascade {
            c.refresh_all_phi()?;
        }
        let val = evaluate(model, ds, Split::Val, cfg.frames, cfg.batch_size)?;
        let val_row = MetricRow { epoch: epoch + 1, split: Split::Val, loss: val.loss, top1: val.top1 };
        on_row(&val_row);
        history.push(val_row);
    }
    Ok(history)
}
