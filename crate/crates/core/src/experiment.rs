//! Evaluation protocols: repeated random splits with median reporting,
//! ablation grids, and leave-one-database-out cross evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{split_by_groups, Dataset, DatasetManifest, ImageLoader, PreprocessConfig};
use crate::error::{Error, Result};
use crate::metrics::{median, plcc, srcc};
use crate::net::{BackboneConfig, ModelConfig, StaircaseModel};
use crate::train::{predict_dataset_all_heads, run_imdt, train_single, EpochRecord, SubProblem, TrainConfig};

pub const ENSEMBLE: &str = "ensemble";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// One model with a head per database, trained on the mixed schedule.
    #[default]
    Imdt,
    /// A separate single-head model per database.
    Single,
}

/// Everything that determines a training run apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSetup {
    pub backbone: BackboneConfig,
    /// Enabled fusion paths; all enabled when absent.
    #[serde(default)]
    pub path_mask: Option<Vec<bool>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub model_seed: u64,
}

impl ExperimentSetup {
    /// Settings for the bundled synthetic databases.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            path_mask: None,
            train: TrainConfig::desk(),
            preprocess: PreprocessConfig::desk(),
            mode: TrainMode::Imdt,
            model_seed: 0,
        }
    }

    pub fn path_mask(&self) -> Vec<bool> {
        self.path_mask.clone().unwrap_or_else(|| vec![true; self.backbone.num_stages().saturating_sub(1)])
    }

    pub fn model_config(&self, head_ids: Vec<String>) -> ModelConfig {
        ModelConfig::new(self.backbone.clone(), self.path_mask(), head_ids)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(vec!["validation".into()]).validate()?;
        self.train.validate()?;
        self.preprocess.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("setup serializes");
        Sha256::digest(&json).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Which head's predictions to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelector {
    Index(usize),
    /// Mean of every head's prediction.
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub srcc: f64,
    pub plcc: f64,
    pub count: usize,
}

impl Scores {
    pub fn of(pred: &[f64], label: &[f64]) -> Result<Self> {
        Ok(Self { srcc: srcc(pred, label)?, plcc: plcc(pred, label)?, count: label.len() })
    }
}

/// Per-head five-crop predictions plus their ensemble mean.
pub fn head_predictions(
    model: &StaircaseModel<f64>,
    data: &Dataset,
    pre: &PreprocessConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let per_head = predict_dataset_all_heads(model, data, pre)?;
    let heads = per_head.len() as f64;
    let ensemble = (0..data.len()).map(|i| per_head.iter().map(|h| h[i]).sum::<f64>() / heads).collect();
    Ok((per_head, ensemble))
}

pub fn evaluate(
    model: &StaircaseModel<f64>,
    data: &Dataset,
    head: HeadSelector,
    pre: &PreprocessConfig,
) -> Result<Scores> {
    if data.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "evaluation needs at least 2 images, `{}` has {}",
            data.database_id,
            data.len()
        )));
    }
    let (per_head, ensemble) = head_predictions(model, data, pre)?;
    let pred = match head {
        HeadSelector::Index(h) => per_head.get(h).ok_or_else(|| {
            Error::invalid(format!("head {h} out of range; model has {} heads", per_head.len()))
        })?,
        HeadSelector::Ensemble => &ensemble,
    };
    Scores::of(pred, &data.labels())
}

/// A trained model together with the head that serves one database.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub database_id: String,
    pub model: StaircaseModel<f64>,
    pub head: usize,
}

/// Trains on `train_sets` (validation carved from each) and returns the
/// best snapshot per database.
pub fn train_databases(
    setup: &ExperimentSetup,
    train_sets: &[Dataset],
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<Trained>> {
    let subs = train_sets
        .iter()
        .enumerate()
        .map(|(i, d)| SubProblem::carve(i, d, setup.train.seed))
        .collect::<Result<Vec<_>>>()?;
    match setup.mode {
        TrainMode::Imdt => {
            let ids = train_sets.iter().map(|d| d.database_id.clone()).collect();
            let model = StaircaseModel::build(&setup.model_config(ids), setup.model_seed)?;
            let out = run_imdt(model, &subs, &setup.train, &setup.preprocess, sink)?;
            Ok(out
                .best
                .into_iter()
                .zip(&subs)
                .map(|(b, s)| Trained { database_id: s.database_id.clone(), model: b.model, head: s.head })
                .collect())
        }
        TrainMode::Single => subs
            .into_iter()
            .map(|mut s| {
                s.head = 0;
                let model =
                    StaircaseModel::build(&setup.model_config(vec![s.database_id.clone()]), setup.model_seed)?;
                let out = train_single(model, &s, &setup.train, &setup.preprocess, sink)?;
                let best = out.best.into_iter().next().expect("one database");
                Ok(Trained { database_id: s.database_id, model: best.model, head: 0 })
            })
            .collect(),
    }
}

/// One result cell: a database, a split and a head (or the ensemble).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub database: String,
    pub split: usize,
    pub head: String,
    pub srcc: f64,
    pub plcc: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub database: String,
    pub head: String,
    pub srcc: f64,
    pub plcc: f64,
    pub splits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFailure {
    pub split: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub split_seeds: Vec<u64>,
    pub config_hash: String,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub medians: Vec<MedianRow>,
    pub failures: Vec<SplitFailure>,
    pub provenance: Provenance,
}

impl MetricsReport {
    /// Report from rows, computing medians per `(database, head)`.
    pub fn from_rows(rows: Vec<MetricsRow>, failures: Vec<SplitFailure>, provenance: Provenance) -> Self {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &rows {
            let k = (r.database.clone(), r.head.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let medians = keys
            .into_iter()
            .filter_map(|(database, head)| {
                let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.database == database && r.head == head).collect();
                let s: Vec<f64> = sel.iter().map(|r| r.srcc).collect();
                let p: Vec<f64> = sel.iter().map(|r| r.plcc).collect();
                Some(MedianRow { srcc: median(&s)?, plcc: median(&p)?, splits: sel.len(), database, head })
            })
            .collect();
        Self { rows, medians, failures, provenance }
    }

    pub fn median_for(&self, database: &str, head: &str) -> Option<&MedianRow> {
        self.medians.iter().find(|m| m.database == database && m.head == head)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Flat `database,split,head,srcc,plcc` table.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["database", "split", "head", "srcc", "plcc"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.database.clone(), r.split.to_string(), r.head.clone(), r.srcc.to_string(), r.plcc.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Split seeds used by the protocol: `master + 1 ..= master + n`.
pub fn split_seeds(master: u64, n_splits: usize) -> Vec<u64> {
    (1..=n_splits as u64).map(|s| master.wrapping_add(s)).collect()
}

/// Splits every database 80/20, trains, and scores each database's test
/// part with its own head.
pub fn run_split(setup: &ExperimentSetup, datasets: &[Dataset], split: usize, seed: u64) -> Result<Vec<MetricsRow>> {
    let mut train_sets = Vec::with_capacity(datasets.len());
    let mut test_sets = Vec::with_capacity(datasets.len());
    for d in datasets {
        let (tr, te) = split_by_groups(&d.groups(), crate::data::split::TRAIN_FRACTION, seed)?;
        train_sets.push(d.subset(&tr));
        test_sets.push(d.subset(&te));
    }
    let trained = train_databases(setup, &train_sets, &mut |_| Ok(()))?;
    trained
        .iter()
        .zip(&test_sets)
        .map(|(t, test)| {
            let s = evaluate(&t.model, test, HeadSelector::Index(t.head), &setup.preprocess)?;
            Ok(MetricsRow {
                database: t.database_id.clone(),
                split,
                head: t.database_id.clone(),
                srcc: s.srcc,
                plcc: s.plcc,
                count: s.count,
            })
        })
        .collect()
}

/// Repeats [`run_split`] over `n_splits` seeds and reports per-split values
/// with their medians. A failing split is recorded and the rest continue.
pub fn run_splits_protocol(
    setup: &ExperimentSetup,
    datasets: &[Dataset],
    n_splits: usize,
    master_seed: u64,
) -> Result<MetricsReport> {
    setup.validate()?;
    if n_splits == 0 || datasets.is_empty() {
        return Err(Error::invalid("the split protocol needs at least one split and one database"));
    }
    let seeds = split_seeds(master_seed, n_splits);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        match run_split(setup, datasets, k + 1, seed) {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(SplitFailure { split: k + 1, error: e.to_string() }),
        }
    }
    let provenance = Provenance { seed: master_seed, split_seeds: seeds, config_hash: setup.config_hash(), checkpoint: None };
    Ok(MetricsReport::from_rows(rows, failures, provenance))
}

/// One configuration in an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub path_mask: Vec<bool>,
    pub mode: TrainMode,
}

/// The 2x2 grid of fusion paths on/off and mixed training on/off.
pub fn ablation_grid(backbone: &BackboneConfig) -> Vec<AblationVariant> {
    let n = backbone.num_stages().saturating_sub(1);
    let mut out = Vec::with_capacity(4);
    for (staircase, s_name) in [(false, "plain"), (true, "staircase")] {
        for (mode, m_name) in [(TrainMode::Single, "single"), (TrainMode::Imdt, "imdt")] {
            out.push(AblationVariant { name: format!("{s_name}+{m_name}"), path_mask: vec![staircase; n], mode });
        }
    }
    out
}

/// One enabled path at a time, then none and all.
pub fn path_variants(backbone: &BackboneConfig, mode: TrainMode) -> Vec<AblationVariant> {
    let n = backbone.num_stages().saturating_sub(1);
    let mut out: Vec<AblationVariant> = (0..n)
        .map(|k| AblationVariant {
            name: format!("path{}", k + 1),
            path_mask: (0..n).map(|j| j == k).collect(),
            mode,
        })
        .collect();
    out.push(AblationVariant { name: "none".into(), path_mask: vec![false; n], mode });
    out.push(AblationVariant { name: "all".into(), path_mask: vec![true; n], mode });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub database: String,
    pub srcc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: &str, seed: u64, database: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed && r.database == database)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,database,srcc,plcc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.seed, r.database, r.srcc, r.plcc);
        }
        s
    }
}

/// Trains every variant for every seed on the same split. Each seed drives
/// the data split, the model initialization and the training stream.
pub fn run_ablation(
    base: &ExperimentSetup,
    datasets: &[Dataset],
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &seed in seeds {
        for v in variants {
            let mut setup = base.clone();
            setup.path_mask = Some(v.path_mask.clone());
            setup.mode = v.mode;
            setup.model_seed = seed;
            setup.train.seed = seed;
            setup.validate()?;
            for r in run_split(&setup, datasets, 1, seed)? {
                table.rows.push(AblationRow {
                    variant: v.name.clone(),
                    seed,
                    database: r.database,
                    srcc: r.srcc,
                    plcc: r.plcc,
                });
            }
        }
    }
    Ok(table)
}

/// Leave-one-database-out result for one held-out database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDbResult {
    pub held_out: String,
    /// `(training database, scores)` for each trained head.
    pub heads: Vec<(String, Scores)>,
    pub ensemble: Scores,
}

impl CrossDbResult {
    pub fn min_head_srcc(&self) -> f64 {
        self.heads.iter().map(|(_, s)| s.srcc).fold(f64::INFINITY, f64::min)
    }
}

/// Progress notifications from [`run_cross_db`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CrossDbEvent {
    TrainingStarted { held_out: String },
    TrainingFinished { held_out: String },
}

pub fn load_all(manifests: &[&DatasetManifest], pre: &PreprocessConfig, loader: &dyn ImageLoader) -> Result<Vec<Dataset>> {
    manifests.iter().map(|m| Dataset::load(m, pre, loader)).collect()
}

/// For each database: train on all the others, then score every head and
/// the head ensemble on the whole held-out database. Training images are
/// loaded before training starts and the held-out images only after it
/// finishes.
pub fn run_cross_db(
    setup: &ExperimentSetup,
    manifests: &[DatasetManifest],
    loader: &dyn ImageLoader,
    events: &mut dyn FnMut(CrossDbEvent),
) -> Result<Vec<CrossDbResult>> {
    setup.validate()?;
    if manifests.len() < 3 {
        return Err(Error::Config(format!(
            "cross-database evaluation needs at least 3 databases (2 to train, 1 held out), got {}",
            manifests.len()
        )));
    }
    let mut setup = setup.clone();
    setup.mode = TrainMode::Imdt;
    let mut out = Vec::with_capacity(manifests.len());
    for (h, held) in manifests.iter().enumerate() {
        let train_manifests: Vec<&DatasetManifest> =
            manifests.iter().enumerate().filter(|&(i, _)| i != h).map(|(_, m)| m).collect();
        let train_sets = load_all(&train_manifests, &setup.preprocess, loader)?;
        events(CrossDbEvent::TrainingStarted { held_out: held.database_id.clone() });
        let subs = train_sets
            .iter()
            .enumerate()
            .map(|(i, d)| SubProblem::carve(i, d, setup.train.seed))
            .collect::<Result<Vec<_>>>()?;
        let ids = train_sets.iter().map(|d| d.database_id.clone()).collect();
        let model = StaircaseModel::build(&setup.model_config(ids), setup.model_seed)?;
        let trained = run_imdt(model, &subs, &setup.train, &setup.preprocess, &mut |_| Ok(()))?;
        events(CrossDbEvent::TrainingFinished { held_out: held.database_id.clone() });

        let test = Dataset::load(held, &setup.preprocess, loader)?;
        let (per_head, ensemble) = head_predictions(&trained.final_model, &test, &setup.preprocess)?;
        let labels = test.labels();
        let heads = per_head
            .iter()
            .zip(&train_sets)
            .map(|(p, d)| Ok((d.database_id.clone(), Scores::of(p, &labels)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(CrossDbResult { held_out: held.database_id.clone(), heads, ensemble: Scores::of(&ensemble, &labels)? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
