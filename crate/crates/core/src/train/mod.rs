//! Iterative mixed database training and the single-database baseline.
//!
//! Every database owns one regressor head. The schedule alternates between
//! databases; during an epoch on database `i` only the shared parameters
//! (backbone and fusion paths) and head `i` are updated. After each epoch the
//! pair is validated on database `i`'s validation split and snapshotted when
//! the criterion strictly improves.

mod schedule;
mod state;

pub use schedule::{build_schedule, compute_epoch_budget, ScheduleEntry};
pub use state::{run_imdt, train_single, EpochRecord, Snapshot, TrainOutcome, TrainState};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{five_crop_batch, score_aggregate, train_batch, Dataset, PreprocessConfig};
use crate::error::{Error, Result};
use crate::metrics::{plcc, srcc};
use crate::net::StaircaseModel;
use crate::optim::{adam_step, AdamConfig};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Share of each training split kept aside for checkpoint selection.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Srcc,
    Plcc,
}

impl Criterion {
    /// Criterion value of `pred` against `label`. Constant predictions carry
    /// no ranking information and score 0.
    pub fn evaluate(self, pred: &[f64], label: &[f64]) -> Result<f64> {
        if label.len() < 2 {
            return Err(Error::UndefinedCorrelation(format!(
                "validation needs at least 2 items, got {}",
                label.len()
            )));
        }
        if pred.len() == label.len() && pred.iter().all(|&p| p == pred[0]) && pred[0].is_finite() {
            return Ok(0.0);
        }
        match self {
            Criterion::Srcc => srcc(pred, label),
            Criterion::Plcc => plcc(pred, label),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over all databases.
    #[serde(default = "default_loops")]
    pub loops: usize,
    /// Lower bound on epochs per database per loop.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub criterion: Criterion,
    /// Sets each head's output affine from its training labels (mean and
    /// standard deviation) before the first epoch.
    #[serde(default = "default_true")]
    pub label_scaling: bool,
}

fn default_loops() -> usize {
    3
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    30
}
fn default_lr() -> f64 {
    AdamConfig::default().lr
}
fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_eps() -> f64 {
    AdamConfig::default().eps
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loops: default_loops(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
            criterion: Criterion::Srcc,
            label_scaling: true,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the 32x32 synthetic databases.
    pub fn desk() -> Self {
        Self { loops: 3, epochs: 5, batch_size: 8, lr: 3e-3, ..Self::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// `lr = 0` is accepted so that frozen runs can be expressed.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.loops == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("loops, epochs and batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("beta1 and beta2 must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// One database's training problem.
#[derive(Clone, Debug, PartialEq)]
pub struct SubProblem {
    pub database_id: String,
    pub head: usize,
    pub train: Dataset,
    pub validation: Dataset,
}

impl SubProblem {
    pub fn new(head: usize, train: Dataset, validation: Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid(format!("database `{}` has an empty training split", train.database_id)));
        }
        if validation.len() < 2 {
            return Err(Error::invalid(format!(
                "database `{}` needs at least 2 validation items, got {}",
                train.database_id,
                validation.len()
            )));
        }
        Ok(Self { database_id: train.database_id.clone(), head, train, validation })
    }

    /// Carves a content-aware validation split out of `train`.
    pub fn carve(head: usize, train: &Dataset, seed: u64) -> Result<Self> {
        let (t, v) = train.split(1.0 - VALIDATION_FRACTION, validation_seed(seed))?;
        Self::new(head, t, v)
    }

    /// `N_i`, the number of training images.
    pub fn size(&self) -> usize {
        self.train.len()
    }
}

/// Seed of the group split that [`SubProblem::carve`] performs for a run
/// seeded with `seed`.
pub fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x7661_6c69_6461_7465
}

fn epoch_seed(seed: u64, e: &ScheduleEntry) -> u64 {
    let mut h = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    for v in [e.loop_index, e.database, e.epoch] {
        h = (h ^ v as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(31);
    }
    h
}

/// One pass over `sub.train` in shuffled batches; returns the mean batch
/// loss. Only the shared parameters and head `sub.head` are stepped.
pub fn train_epoch<T: Scalar>(
    model: &mut StaircaseModel<T>,
    sub: &SubProblem,
    cfg: &TrainConfig,
    pre: &PreprocessConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..sub.train.len()).collect();
    order.shuffle(rng);
    let mut ids = model.shared_param_ids();
    ids.extend(model.head_param_ids(sub.head));
    let adam = cfg.adam();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let samples: Vec<_> = chunk.iter().map(|&i| &sub.train.samples[i]).collect();
        let (images, labels) = train_batch::<T>(&samples, pre, rng)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let y = model.forward(&mut tape, x, sub.head, true)?;
        let target = tape.constant(Tensor::from_vec(labels.iter().map(|&v| T::lit(v)).collect()));
        let loss = tape.mse_loss(y, target)?;
        total += tape.value(loss).data()[0].as_f64();
        tape.backward(loss, model.params_mut())?;
        adam_step(model.params_mut(), &ids, &adam);
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Images scored together during five-crop inference.
const INFERENCE_CHUNK: usize = 32;

/// Five-crop scores of every image under every head; `out[head][image]`.
pub fn predict_dataset_all_heads<T: Scalar>(
    model: &StaircaseModel<T>,
    data: &Dataset,
    pre: &PreprocessConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(data.len()); model.num_heads()];
    for chunk in data.samples.chunks(INFERENCE_CHUNK) {
        let parts = chunk.iter().map(|s| five_crop_batch::<T>(&s.image, pre)).collect::<Result<Vec<_>>>()?;
        let scores = model.predict_all_heads(&Tensor::stack_batch(&parts)?)?;
        for (h, head_scores) in scores.iter().enumerate() {
            for five in head_scores.chunks(5) {
                let v: Vec<f64> = five.iter().map(|s| s.as_f64()).collect();
                out[h].push(score_aggregate(&v)?);
            }
        }
    }
    Ok(out)
}

/// Five-crop scores under one head.
pub fn predict_dataset<T: Scalar>(
    model: &StaircaseModel<T>,
    data: &Dataset,
    head: usize,
    pre: &PreprocessConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(INFERENCE_CHUNK) {
        let parts = chunk.iter().map(|s| five_crop_batch::<T>(&s.image, pre)).collect::<Result<Vec<_>>>()?;
        let scores = model.predict(&Tensor::stack_batch(&parts)?, head)?;
        for five in scores.chunks(5) {
            let v: Vec<f64> = five.iter().map(|s| s.as_f64()).collect();
            out.push(score_aggregate(&v)?);
        }
    }
    Ok(out)
}

/// Criterion of head `head` on `data` under five-crop inference.
pub fn validate<T: Scalar>(
    model: &StaircaseModel<T>,
    data: &Dataset,
    head: usize,
    pre: &PreprocessConfig,
    criterion: Criterion,
) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("validation needs at least 2 items, got {}", data.len())));
    }
    criterion.evaluate(&predict_dataset(model, data, head, pre)?, &data.labels())
}
