use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_schedule, epoch_seed, train_epoch, validate, ScheduleEntry, SubProblem, TrainConfig};
use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::net::checkpoint::{decode, encode, ModelDoc};
use crate::net::{ScoreScale, StaircaseModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(rename = "loop")]
    pub loop_index: usize,
    pub db: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub criterion: f64,
    pub snapshot_taken: bool,
}

/// Best model seen for one database. `entry` is `None` while the initial
/// model is still the best.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub model: StaircaseModel<T>,
    pub criterion: f64,
    pub entry: Option<ScheduleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub final_model: StaircaseModel<T>,
    pub best: Vec<Snapshot<T>>,
    pub log: Vec<EpochRecord>,
}

/// Everything needed to continue a run from the next schedule entry.
///
/// Each epoch draws its shuffling and cropping randomness from a generator
/// seeded by `(seed, loop, database, epoch)`, so the cursor alone fixes the
/// random stream of the remainder of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: StaircaseModel<T>,
    pub best: Vec<Snapshot<T>>,
    pub schedule: Vec<ScheduleEntry>,
    pub cursor: usize,
    pub log: Vec<EpochRecord>,
}

fn check_subproblems<T: Scalar>(model: &StaircaseModel<T>, subs: &[SubProblem]) -> Result<()> {
    if subs.is_empty() {
        return Err(Error::invalid("training needs at least one database"));
    }
    for (k, s) in subs.iter().enumerate() {
        if s.head >= model.num_heads() {
            return Err(Error::invalid(format!(
                "database `{}` maps to head {} but the model has {} heads",
                s.database_id,
                s.head,
                model.num_heads()
            )));
        }
        if subs[..k].iter().any(|o| o.head == s.head) {
            return Err(Error::invalid(format!("head {} is assigned to two databases", s.head)));
        }
    }
    Ok(())
}

impl<T: Scalar> TrainState<T> {
    /// Prepares a fresh run: optional label scaling, the schedule, and the
    /// initial model's validation score as every database's first best.
    pub fn init(
        mut model: StaircaseModel<T>,
        subs: &[SubProblem],
        config: &TrainConfig,
        pre: &PreprocessConfig,
    ) -> Result<Self> {
        config.validate()?;
        pre.validate()?;
        check_subproblems(&model, subs)?;
        model.set_preprocess(Some(pre.clone()));
        if config.label_scaling {
            for s in subs {
                let labels = s.train.labels();
                let n = labels.len() as f64;
                let mean = labels.iter().sum::<f64>() / n;
                let sd = (labels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                let scale = if sd > 0.0 { sd } else { 1.0 };
                model.set_score_scale(s.head, ScoreScale { offset: mean, scale })?;
            }
        }
        let sizes: Vec<usize> = subs.iter().map(SubProblem::size).collect();
        let schedule = build_schedule(config.loops, config.epochs, &sizes)?;
        let best = subs
            .iter()
            .map(|s| {
                let criterion = validate(&model, &s.validation, s.head, pre, config.criterion)?;
                Ok(Snapshot { model: model.clone(), criterion, entry: None })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), model, best, schedule, cursor: 0, log: Vec::new() })
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.schedule.len()
    }

    /// Runs the next schedule entry.
    pub fn step(&mut self, subs: &[SubProblem], pre: &PreprocessConfig) -> Result<EpochRecord> {
        let entry = *self.schedule.get(self.cursor).ok_or_else(|| Error::invalid("schedule already complete"))?;
        let sub = subs
            .get(entry.database)
            .ok_or_else(|| Error::invalid(format!("schedule refers to database {}", entry.database)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, &entry));
        let mean_loss = train_epoch(&mut self.model, sub, &self.config, pre, &mut rng)?;
        let criterion = validate(&self.model, &sub.validation, sub.head, pre, self.config.criterion)?;
        let best = &mut self.best[entry.database];
        let snapshot_taken = criterion > best.criterion;
        if snapshot_taken {
            *best = Snapshot { model: self.model.clone(), criterion, entry: Some(entry) };
        }
        let record = EpochRecord {
            loop_index: entry.loop_index,
            db: sub.database_id.clone(),
            epoch: entry.epoch,
            mean_loss,
            criterion,
            snapshot_taken,
        };
        self.log.push(record.clone());
        self.cursor += 1;
        Ok(record)
    }

    /// Runs up to `limit` entries (all remaining when `None`), handing each
    /// record to `sink` as soon as it is produced.
    pub fn run(
        &mut self,
        subs: &[SubProblem],
        pre: &PreprocessConfig,
        sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
        limit: Option<usize>,
    ) -> Result<()> {
        check_subproblems(&self.model, subs)?;
        if subs.len() != self.best.len() {
            return Err(Error::invalid(format!(
                "state tracks {} databases, {} supplied",
                self.best.len(),
                subs.len()
            )));
        }
        let mut done = 0;
        while !self.is_done() && limit.is_none_or(|l| done < l) {
            let record = self.step(subs, pre)?;
            sink(&record)?;
            done += 1;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome<T> {
        TrainOutcome { final_model: self.model, best: self.best, log: self.log }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let doc = StateDoc {
            model: self.model.doc(),
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            cursor: self.cursor,
            log: self.log.clone(),
            best: self
                .best
                .iter()
                .map(|b| BestDoc { criterion: b.criterion, entry: b.entry, score_scales: b.model.score_scales().to_vec() })
                .collect(),
        };
        let mut records = self.model.records("", true);
        for (i, b) in self.best.iter().enumerate() {
            records.extend(b.model.records(&format!("best{i}/"), false));
        }
        encode(&serde_json::to_string(&doc).expect("state doc serializes"), &records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (doc, records) = decode(bytes)?;
        let doc: StateDoc =
            serde_json::from_str(&doc).map_err(|source| Error::Json { context: "training state".into(), source })?;
        let map: HashMap<&str, &Tensor<f64>> = records.iter().map(|r| (r.name.as_str(), &r.tensor)).collect();
        let model = StaircaseModel::restore(&doc.model, &map, "", true)?;
        let best = doc
            .best
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let snap_doc = ModelDoc { score_scales: b.score_scales.clone(), ..doc.model.clone() };
                let model = StaircaseModel::restore(&snap_doc, &map, &format!("best{i}/"), false)?;
                Ok(Snapshot { model, criterion: b.criterion, entry: b.entry })
            })
            .collect::<Result<Vec<_>>>()?;
        if doc.cursor > doc.schedule.len() {
            return Err(Error::Checkpoint("cursor beyond the end of the schedule".into()));
        }
        Ok(Self { config: doc.config, model, best, schedule: doc.schedule, cursor: doc.cursor, log: doc.log })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BestDoc {
    criterion: f64,
    entry: Option<ScheduleEntry>,
    score_scales: Vec<ScoreScale>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    model: ModelDoc,
    config: TrainConfig,
    schedule: Vec<ScheduleEntry>,
    cursor: usize,
    log: Vec<EpochRecord>,
    best: Vec<BestDoc>,
}

/// Trains `model` on all sub-problems following the mixed schedule.
pub fn run_imdt<T: Scalar>(
    model: StaircaseModel<T>,
    subs: &[SubProblem],
    config: &TrainConfig,
    pre: &PreprocessConfig,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    let mut state = TrainState::init(model, subs, config, pre)?;
    state.run(subs, pre, sink, None)?;
    Ok(state.into_outcome())
}

/// Single-database training: `loops * epochs` epochs with best-epoch
/// selection, updating the shared parameters and the database's head.
pub fn train_single<T: Scalar>(
    model: StaircaseModel<T>,
    sub: &SubProblem,
    config: &TrainConfig,
    pre: &PreprocessConfig,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    run_imdt(model, std::slice::from_ref(sub), config, pre, sink)
}
