use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use stairiqa::data::{load_manifest, DatasetManifest, PreprocessConfig};
use stairiqa::experiment::{ExperimentSetup, TrainMode};
use stairiqa::train::TrainConfig;
use stairiqa::BackboneConfig;

pub const SEED_ENV: &str = "STAIRIQA_SEED";

/// A run described by a JSON file. Relative paths resolve against the
/// directory holding the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifests: Vec<PathBuf>,
    pub out: PathBuf,
    /// Master seed. Drives model initialization, epoch shuffling and the
    /// train/test split.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "BackboneConfig::desk")]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub path_mask: Option<Vec<bool>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub mode: TrainMode,
    /// Share of each database used for training; the rest is written out as
    /// a test manifest. `null` trains on everything.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: Option<f64>,
}

fn default_train_fraction() -> Option<f64> {
    Some(0.8)
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<TrainMode>,
}

impl RunConfig {
    /// Reads, resolves and validates a config. Precedence for the seed is
    /// flag, then `STAIRIQA_SEED`, then the file.
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = base.canonicalize().with_context(|| format!("resolving {}", base.display()))?;
        for m in &mut cfg.manifests {
            *m = base.join(&*m);
        }
        cfg.out = match &overrides.out {
            Some(o) => o.clone(),
            None => base.join(&cfg.out),
        };
        if cfg.train.seed != 0 && cfg.train.seed != cfg.seed {
            bail!("train.seed is derived from the top-level `seed`; set that instead");
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(m) = overrides.mode {
            cfg.mode = m;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.manifests.is_empty() {
            bail!("config lists no manifests");
        }
        if let Some(f) = self.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                bail!("train_fraction must lie strictly between 0 and 1, got {f}");
            }
        }
        self.setup().validate()?;
        Ok(())
    }

    pub fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            backbone: self.backbone.clone(),
            path_mask: self.path_mask.clone(),
            train: self.train.clone(),
            preprocess: self.preprocess.clone(),
            mode: self.mode,
            model_seed: self.seed,
        }
    }

    /// Seed of the train/test split.
    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Parses every manifest and checks that database ids are distinct.
    pub fn load_manifests(&self) -> anyhow::Result<Vec<DatasetManifest>> {
        let manifests = self
            .manifests
            .iter()
            .map(|p| load_manifest(p).map_err(anyhow::Error::from))
            .collect::<anyhow::Result<Vec<_>>>()?;
        for (i, m) in manifests.iter().enumerate() {
            if manifests[..i].iter().any(|o| o.database_id == m.database_id) {
                bail!("two manifests share the database id `{}`", m.database_id);
            }
        }
        Ok(manifests)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
