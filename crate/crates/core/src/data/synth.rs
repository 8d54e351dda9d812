//! Procedural stand-in IQA databases.
//!
//! Each scene (a gradient background, smooth texture and a few hard-edged
//! shapes) is rendered once and then degraded several times at a sampled
//! magnitude `m` in `[0, 1]`. By default every listed distortion family is
//! applied at that magnitude (blur, then block averaging, then noise);
//! `Composition::Single` instead picks one family per image. All versions of a
//! scene share a group id. The opinion score is
//!
//! ```text
//! mos = offset + scale * (100 * (1 - m) + jitter),   jitter ~ U(-a, a)
//! ```
//!
//! so it is strictly decreasing in `m` up to the bounded jitter.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::PlanarImage;
use super::{Dataset, PreprocessConfig, Sample};
use super::manifest::{DatasetManifest, ManifestEntry};
use super::ppm::{encode_ppm, RgbImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Blur,
    Noise,
    Block,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// All families at the shared magnitude, in the order blur, block, noise.
    #[default]
    Combined,
    /// One family per image, cycling through the list.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDbSpec {
    pub id: String,
    pub images: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Distorted versions rendered from each scene.
    #[serde(default = "default_per_scene")]
    pub distortions_per_scene: usize,
    #[serde(default = "all_families")]
    pub families: Vec<Family>,
    #[serde(default)]
    pub composition: Composition,
    /// Range the normalized magnitude is drawn from.
    #[serde(default = "unit_range")]
    pub magnitude_range: [f64; 2],
    /// Gaussian blur sigma (pixels) at magnitude 0 and 1.
    #[serde(default = "default_blur")]
    pub blur_sigma: [f64; 2],
    /// Additive Gaussian noise sigma (intensity units) at magnitude 0 and 1.
    #[serde(default = "default_noise")]
    pub noise_sigma: [f64; 2],
    /// Blend weight toward the block-averaged image at magnitude 0 and 1.
    #[serde(default = "unit_range")]
    pub block_strength: [f64; 2],
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default = "one")]
    pub mos_scale: f64,
    #[serde(default)]
    pub mos_offset: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_resolution() -> usize {
    32
}
fn default_per_scene() -> usize {
    2
}
fn all_families() -> Vec<Family> {
    vec![Family::Blur, Family::Noise, Family::Block]
}
fn unit_range() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_blur() -> [f64; 2] {
    [0.0, 2.5]
}
fn default_noise() -> [f64; 2] {
    [0.0, 0.2]
}
fn default_block() -> usize {
    4
}
fn one() -> f64 {
    1.0
}
fn default_jitter() -> f64 {
    2.0
}

impl SyntheticDbSpec {
    pub fn new(id: &str, images: usize) -> Self {
        Self {
            id: id.into(),
            images,
            resolution: default_resolution(),
            distortions_per_scene: default_per_scene(),
            families: all_families(),
            composition: Composition::Combined,
            magnitude_range: unit_range(),
            blur_sigma: default_blur(),
            noise_sigma: default_noise(),
            block_strength: unit_range(),
            block_size: default_block(),
            mos_scale: 1.0,
            mos_offset: 0.0,
            jitter: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic database `{}`: {m}", self.id)));
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return bad("id must be a non-empty file name".into());
        }
        if self.images == 0 || self.resolution < 4 || self.distortions_per_scene == 0 {
            return bad("images, resolution (>= 4) and distortions_per_scene must be positive".into());
        }
        if self.images <= self.distortions_per_scene {
            return bad("needs at least two scenes for content-aware splitting".into());
        }
        if self.families.is_empty() {
            return bad("at least one distortion family is required".into());
        }
        let [lo, hi] = self.magnitude_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return bad(format!("magnitude range {:?} must lie within [0, 1]", self.magnitude_range));
        }
        if !(self.mos_scale > 0.0) || !self.mos_offset.is_finite() || !(self.jitter >= 0.0) {
            return bad("mos_scale must be positive, mos_offset finite, jitter non-negative".into());
        }
        if self.block_size == 0 {
            return bad("block_size must be positive".into());
        }
        Ok(())
    }

    /// Opinion score for magnitude `m` and jitter draw `j`.
    pub fn mos_for(&self, magnitude: f64, jitter: f64) -> f64 {
        self.mos_offset + self.mos_scale * (100.0 * (1.0 - magnitude) + jitter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub databases: Vec<SyntheticDbSpec>,
}

impl Default for SyntheticSpec {
    /// Three databases of 200, 100 and 50 images on distinct score scales:
    /// 0-100, a compressed and shifted 10-90, and a 1-5 opinion scale.
    fn default() -> Self {
        let a = SyntheticDbSpec::new("synth_a", 200);
        let b = SyntheticDbSpec { mos_scale: 0.8, mos_offset: 10.0, ..SyntheticDbSpec::new("synth_b", 100) };
        let c = SyntheticDbSpec { mos_scale: 0.04, mos_offset: 1.0, ..SyntheticDbSpec::new("synth_c", 50) };
        Self { seed: 2024, databases: vec![a, b, c] }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.databases.is_empty() {
            return Err(Error::Config("synthetic spec lists no databases".into()));
        }
        for (i, db) in self.databases.iter().enumerate() {
            db.validate()?;
            if self.databases[..i].iter().any(|o| o.id == db.id) {
                return Err(Error::Config(format!("duplicate synthetic database id `{}`", db.id)));
            }
        }
        Ok(())
    }
}

/// One rendered, distorted image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticItem {
    pub image_path: String,
    pub group_id: String,
    pub families: Vec<Family>,
    pub magnitude: f64,
    pub mos: f64,
    pub image: RgbImage,
}

fn stream_seed(seed: u64, id: &str, scene: usize) -> u64 {
    let mut h = seed ^ 0x517c_c1b7_2722_0a95;
    for b in id.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
    }
    h ^ (scene as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn lerp(range: [f64; 2], t: f64) -> f64 {
    range[0] + t * (range[1] - range[0])
}

pub fn render_scene(res: usize, rng: &mut impl Rng) -> PlanarImage {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());

    const GRID: usize = 5;
    let tex: Vec<f64> = (0..GRID * GRID).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tex_amp = 0.06;
    let texture = |y: usize, x: usize| {
        let gy = y as f64 / res as f64 * (GRID - 1) as f64;
        let gx = x as f64 / res as f64 * (GRID - 1) as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let t = |a: usize, b: usize| tex[a * GRID + b];
        (t(y0, x0) * (1.0 - fx) + t(y0, x1) * fx) * (1.0 - fy) + (t(y1, x0) * (1.0 - fx) + t(y1, x1) * fx) * fy
    };

    enum Shape {
        Disc { cy: f64, cx: f64, r: f64 },
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    }
    let r = res as f64;
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(2..=4))
        .map(|_| {
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
            let shape = if rng.random_bool(0.5) {
                Shape::Disc { cy: rng.random_range(0.0..r), cx: rng.random_range(0.0..r), r: rng.random_range(0.1..0.3) * r }
            } else {
                let (h, w) = (rng.random_range(0.15..0.5) * r, rng.random_range(0.15..0.5) * r);
                let (y0, x0) = (rng.random_range(0.0..r - h), rng.random_range(0.0..r - w));
                Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
            };
            (shape, color)
        })
        .collect();

    PlanarImage::from_fn(res, res, |c, y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = (((px / r - 0.5) * ca + (py / r - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (shape, color) in &shapes {
            let inside = match *shape {
                Shape::Disc { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
                Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&py) && (x0..x1).contains(&px),
            };
            if inside {
                v = color[c];
            }
        }
        (v + tex_amp * texture(y, x)).clamp(0.0, 1.0)
    })
}

pub fn gaussian_blur(img: &PlanarImage, sigma: f64) -> PlanarImage {
    if sigma < 1e-6 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = PlanarImage::from_fn(img.width, img.height, |c, y, x| {
        kernel.iter().enumerate().map(|(k, w)| w * img.at(c, y, clampi(x as isize + k as isize - radius, img.width))).sum::<f64>()
            / norm
    });
    PlanarImage::from_fn(img.width, img.height, |c, y, x| {
        kernel.iter().enumerate().map(|(k, w)| w * horiz.at(c, clampi(y as isize + k as isize - radius, img.height), x)).sum::<f64>()
            / norm
    })
}

pub fn add_noise(img: &PlanarImage, sigma: f64, rng: &mut impl Rng) -> PlanarImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = (*v + normal.sample(rng)).clamp(0.0, 1.0));
    out
}

pub fn block_quantize(img: &PlanarImage, strength: f64, block: usize) -> PlanarImage {
    if strength <= 0.0 {
        return img.clone();
    }
    let mut blocky = img.clone();
    for c in 0..3 {
        for by in (0..img.height).step_by(block) {
            for bx in (0..img.width).step_by(block) {
                let (ye, xe) = ((by + block).min(img.height), (bx + block).min(img.width));
                let n = ((ye - by) * (xe - bx)) as f64;
                let mean = (by..ye).flat_map(|y| (bx..xe).map(move |x| (y, x))).map(|(y, x)| img.at(c, y, x)).sum::<f64>() / n;
                for y in by..ye {
                    for x in bx..xe {
                        *blocky.at_mut(c, y, x) = mean;
                    }
                }
            }
        }
    }
    let mut out = img.clone();
    for (o, b) in out.data.iter_mut().zip(&blocky.data) {
        *o = (1.0 - strength) * *o + strength * b;
    }
    out
}

/// Renders every item of one database in memory.
pub fn render_database(db: &SyntheticDbSpec, seed: u64) -> Result<Vec<SyntheticItem>> {
    db.validate()?;
    let per = db.distortions_per_scene;
    let scenes = db.images.div_ceil(per);
    let mut items = Vec::with_capacity(db.images);
    for s in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &db.id, s));
        let scene = render_scene(db.resolution, &mut rng);
        for k in 0..per.min(db.images - items.len()) {
            let families = match db.composition {
                Composition::Single => vec![db.families[(s + k) % db.families.len()]],
                Composition::Combined => [Family::Blur, Family::Block, Family::Noise]
                    .into_iter()
                    .filter(|f| db.families.contains(f))
                    .collect(),
            };
            let magnitude = lerp(db.magnitude_range, rng.random_range(0.0..=1.0));
            let mut distorted = scene.clone();
            for family in &families {
                distorted = match family {
                    Family::Blur => gaussian_blur(&distorted, lerp(db.blur_sigma, magnitude)),
                    Family::Noise => add_noise(&distorted, lerp(db.noise_sigma, magnitude), &mut rng),
                    Family::Block => block_quantize(&distorted, lerp(db.block_strength, magnitude), db.block_size),
                };
            }
            let jitter = if db.jitter > 0.0 { rng.random_range(-db.jitter..=db.jitter) } else { 0.0 };
            items.push(SyntheticItem {
                image_path: format!("images/{}_s{s:03}_d{k}.ppm", db.id),
                group_id: format!("{}_s{s:03}", db.id),
                families,
                magnitude,
                mos: db.mos_for(magnitude, jitter),
                image: distorted.to_rgb(),
            });
        }
    }
    Ok(items)
}

/// Renders a database straight into memory, skipping the file round trip.
pub fn synthetic_dataset(db: &SyntheticDbSpec, seed: u64, pre: &PreprocessConfig) -> Result<Dataset> {
    let samples = render_database(db, seed)?
        .into_iter()
        .map(|it| {
            Ok(Sample {
                image: pre.prepare(&PlanarImage::from_rgb(&it.image))?,
                path: PathBuf::from(it.image_path),
                mos: it.mos,
                group_id: it.group_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { database_id: db.id.clone(), samples })
}

/// A written database: its manifest and the sidecar magnitude file.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDb {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub magnitudes: Vec<f64>,
}

/// Writes `<out>/<id>/images/*.ppm`, `<out>/<id>/manifest.csv` and
/// `<out>/<id>/distortion.csv` (image_path,magnitude) for every database.
pub fn gen_synthetic_db(spec: &SyntheticSpec, out: &Path) -> Result<Vec<GeneratedDb>> {
    spec.validate()?;
    let mut result = Vec::with_capacity(spec.databases.len());
    for db in &spec.databases {
        let items = render_database(db, spec.seed)?;
        let dir = out.join(&db.id);
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut sidecar = String::from("image_path,magnitude\n");
        for it in &items {
            let p = dir.join(&it.image_path);
            std::fs::write(&p, encode_ppm(&it.image)).map_err(|e| Error::io(&p, e))?;
            sidecar.push_str(&format!("{},{}\n", it.image_path, it.magnitude));
        }
        let manifest = DatasetManifest {
            database_id: db.id.clone(),
            root: dir.clone(),
            entries: items
                .iter()
                .map(|it| ManifestEntry { image_path: it.image_path.clone(), mos: it.mos, group_id: it.group_id.clone() })
                .collect(),
        };
        let manifest_path = dir.join("manifest.csv");
        manifest.write(&manifest_path)?;
        let sidecar_path = dir.join("distortion.csv");
        std::fs::write(&sidecar_path, sidecar).map_err(|e| Error::io(&sidecar_path, e))?;
        result.push(GeneratedDb {
            manifest,
            manifest_path,
            sidecar_path,
            magnitudes: items.iter().map(|it| it.magnitude).collect(),
        });
    }
    Ok(result)
}
