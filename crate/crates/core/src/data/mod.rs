//! Manifests, image decoding, preprocessing, splitting and synthetic data.

pub mod image;
pub mod manifest;
pub mod ppm;
pub mod split;
pub mod synth;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use image::{five_crop, five_crop_offsets, random_crop, resize_min_dim, score_aggregate, white_fill, PlanarImage};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry};
pub use ppm::{decode_ppm, encode_ppm, RgbImage};
pub use split::{split_80_20, split_by_groups};
pub use synth::{gen_synthetic_db, SyntheticDbSpec, SyntheticSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default = "default_resize")]
    pub resize_min_dim: usize,
    #[serde(default = "default_crop")]
    pub train_crop: usize,
    /// When set, images are placed on a white `[height, width]` canvas
    /// instead of being resized.
    #[serde(default)]
    pub white_fill: Option<[usize; 2]>,
    #[serde(default = "half")]
    pub mean: [f64; 3],
    #[serde(default = "half")]
    pub std: [f64; 3],
}

fn default_resize() -> usize {
    380
}
fn default_crop() -> usize {
    320
}
fn half() -> [f64; 3] {
    [0.5; 3]
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize_min_dim: default_resize(),
            train_crop: default_crop(),
            white_fill: None,
            mean: half(),
            std: half(),
        }
    }
}

impl PreprocessConfig {
    /// Small-image settings used with the synthetic databases.
    pub fn desk() -> Self {
        Self { resize_min_dim: 32, train_crop: 28, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let min_dim = match self.white_fill {
            Some([h, w]) => h.min(w),
            None => self.resize_min_dim,
        };
        if self.train_crop == 0 || min_dim == 0 {
            return Err(Error::Config("preprocess sizes must be positive".into()));
        }
        if self.train_crop > min_dim {
            return Err(Error::Config(format!(
                "train_crop {} exceeds the post-resize minimum dimension {min_dim}",
                self.train_crop
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization mean must be finite and std positive".into()));
        }
        Ok(())
    }

    /// Resize (or white fill) to the working resolution.
    pub fn prepare(&self, img: &PlanarImage) -> Result<PlanarImage> {
        match self.white_fill {
            Some([h, w]) => white_fill(img, h, w),
            None => resize_min_dim(img, self.resize_min_dim),
        }
    }

    pub fn normalize<T: Scalar>(&self, img: &PlanarImage) -> Tensor<T> {
        img.to_tensor(self.mean, self.std)
    }
}

/// Source of decoded images.
pub trait ImageLoader: Send + Sync {
    fn load(&self, path: &Path) -> Result<PlanarImage>;
}

/// Reads binary PPM files from disk.
#[derive(Clone, Copy, Debug, Default)]
pub struct PpmLoader;

impl ImageLoader for PpmLoader {
    fn load(&self, path: &Path) -> Result<PlanarImage> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let rgb = decode_ppm(&bytes).map_err(|e| Error::Input { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(PlanarImage::from_rgb(&rgb))
    }
}

/// Wraps a loader and records every path it is asked for.
#[derive(Debug, Default)]
pub struct LoggingLoader<L> {
    inner: L,
    log: Mutex<Vec<PathBuf>>,
}

impl<L: ImageLoader> LoggingLoader<L> {
    pub fn new(inner: L) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn accessed(&self) -> Vec<PathBuf> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("access log poisoned").clear();
    }
}

impl<L: ImageLoader> ImageLoader for LoggingLoader<L> {
    fn load(&self, path: &Path) -> Result<PlanarImage> {
        self.log.lock().expect("access log poisoned").push(path.to_path_buf());
        self.inner.load(path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    /// Image after resizing or white fill, before cropping.
    pub image: PlanarImage,
    pub mos: f64,
    pub group_id: String,
}

/// A manifest with every image decoded and brought to working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub database_id: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, pre: &PreprocessConfig, loader: &dyn ImageLoader) -> Result<Self> {
        pre.validate()?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let path = manifest.resolve(e);
                let image = loader.load(&path)?;
                let image =
                    pre.prepare(&image).map_err(|err| Error::Input { path: path.clone(), reason: err.to_string() })?;
                Ok(Sample { path, image, mos: e.mos, group_id: e.group_id.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { database_id: manifest.database_id.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.mos).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            database_id: self.database_id.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn groups(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.group_id.as_str()).collect()
    }

    /// Content-aware split into `(first, second)` with `fraction` of the
    /// images on the first side.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (a, b) = split_by_groups(&self.groups(), fraction, seed)?;
        Ok((self.subset(&a), self.subset(&b)))
    }
}

/// Randomly cropped, normalized `[N, 3, crop, crop]` batch and its labels.
pub fn train_batch<T: Scalar>(
    samples: &[&Sample],
    pre: &PreprocessConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let parts = samples
        .iter()
        .map(|s| Ok(pre.normalize(&random_crop(&s.image, pre.train_crop, rng)?.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack_batch(&parts)?, samples.iter().map(|s| s.mos).collect()))
}

/// The five evaluation crops of one image as a `[5, 3, crop, crop]` batch.
pub fn five_crop_batch<T: Scalar>(image: &PlanarImage, pre: &PreprocessConfig) -> Result<Tensor<T>> {
    let crops = five_crop(image, pre.train_crop)?;
    let parts: Vec<Tensor<T>> = crops.iter().map(|c| pre.normalize(c)).collect();
    Tensor::stack_batch(&parts)
}
