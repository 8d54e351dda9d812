//! Multi-stage convolutional backbone, staircase fusion paths and
//! per-database quality regressor heads.
//!
//! Stages are indexed from zero in code and from one in parameter names
//! (`stage1.block1.weight`, `path1.unit2.reduce.weight`, ...).
//!
//! A fusion path originating at stage `i` repeatedly applies a bottleneck
//! unit (1x1 reduce, 3x3 strided, 1x1 expand) that maps stage `j` shaped
//! features onto stage `j + 1`, adding that stage's own output after every
//! unit except the last. The last unit lands on the final stage's shape and
//! its output is summed with the final stage features.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Width of the hidden layer of every regressor head.
pub const HIDDEN_UNITS: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub out_channels: usize,
    #[serde(default = "default_true")]
    pub downsample: bool,
}

fn default_true() -> bool {
    true
}

fn default_input_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: Vec<StageSpec>,
    pub stem_channels: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Adds an identity skip around every non-first block of a stage.
    #[serde(default)]
    pub residual: bool,
}

impl BackboneConfig {
    /// Plain backbone with one block per stage, every stage halving resolution.
    pub fn plain(stem_channels: usize, channels: &[usize]) -> Self {
        Self {
            stages: channels
                .iter()
                .map(|&c| StageSpec { blocks: 1, out_channels: c, downsample: true })
                .collect(),
            stem_channels,
            input_channels: 3,
            residual: false,
        }
    }

    /// Four stages of 8/16/32/64 channels behind an 8-channel stem.
    pub fn desk() -> Self {
        Self::plain(8, &[8, 16, 32, 64])
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Width `P` of the pooled feature vector.
    pub fn feature_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stem_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("stem and input channel counts must be positive".into()));
        }
        for (s, spec) in self.stages.iter().enumerate() {
            if spec.blocks == 0 || spec.out_channels == 0 {
                return Err(Error::Config(format!(
                    "stage {} needs positive block and channel counts",
                    s + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// One flag per origin stage `1..N_s-1`; `false` removes that fusion path.
    pub path_mask: Vec<bool>,
    /// Database id served by each regressor head, in head order.
    pub head_ids: Vec<String>,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, path_mask: Vec<bool>, head_ids: Vec<String>) -> Self {
        Self { backbone, path_mask, head_ids }
    }

    /// All fusion paths enabled.
    pub fn staircase(backbone: BackboneConfig, head_ids: Vec<String>) -> Self {
        let paths = backbone.num_stages().saturating_sub(1);
        Self::new(backbone, vec![true; paths], head_ids)
    }

    /// No fusion paths: the plain backbone with regressor heads.
    pub fn plain(backbone: BackboneConfig, head_ids: Vec<String>) -> Self {
        let paths = backbone.num_stages().saturating_sub(1);
        Self::new(backbone, vec![false; paths], head_ids)
    }

    pub fn num_heads(&self) -> usize {
        self.head_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let ns = self.backbone.num_stages();
        if self.path_mask.len() != ns - 1 {
            return Err(Error::Config(format!(
                "path mask has {} entries but a {ns}-stage backbone has {} fusion paths",
                self.path_mask.len(),
                ns - 1
            )));
        }
        if self.head_ids.is_empty() {
            return Err(Error::Config("at least one regressor head is required".into()));
        }
        for (i, id) in self.head_ids.iter().enumerate() {
            if self.head_ids[..i].contains(id) {
                return Err(Error::Config(format!("duplicate head id `{id}`")));
            }
        }
        // Every unit in a path reduces its input to a quarter of the channels.
        if let Some(first) = self.path_mask.iter().position(|&on| on) {
            for s in first..ns - 1 {
                let c = self.backbone.stages[s].out_channels;
                if !c.is_multiple_of(4) {
                    return Err(Error::Config(format!(
                        "stage {} has {c} channels, which is not divisible by 4 as fusion requires",
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Affine map from a head's raw output to the database's score scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub offset: f64,
    pub scale: f64,
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self { offset: 0.0, scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BottleneckUnit {
    pub(crate) reduce: ConvIds,
    pub(crate) spatial: ConvIds,
    pub(crate) expand: ConvIds,
    in_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FusionPath {
    pub origin: usize,
    /// `units[k]` maps stage `origin + k` features onto stage `origin + k + 1`.
    pub units: Vec<BottleneckUnit>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct HeadIds {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub stem: ConvIds,
    pub stages: Vec<Vec<ConvIds>>,
    pub paths: Vec<FusionPath>,
    pub heads: Vec<HeadIds>,
}

/// Stage outputs `F_1..F_{N_s}` of one forward pass.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub stages: Vec<Var>,
}

/// The full parameter set: backbone and fusion paths (shared) plus one
/// regressor head per database.
#[derive(Clone, Debug, PartialEq)]
pub struct StaircaseModel<T> {
    config: ModelConfig,
    seed: u64,
    pub(crate) params: ParamStore<T>,
    pub(crate) layout: Layout,
    score_scales: Vec<ScoreScale>,
    preprocess: Option<PreprocessConfig>,
}

/// Per-parameter RNG seed so each tensor's initial value depends only on
/// the model seed and its own name.
fn init_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Builder<T> {
    params: ParamStore<T>,
    seed: u64,
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, stride: usize) -> Result<ConvIds> {
        let fan_in = inp * k * k;
        let wname = format!("{name}.weight");
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(self.seed, &wname));
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[out, inp, k, k], |_| T::lit(normal.sample(&mut rng)));
        let weight = self.params.insert(wname, w)?;
        let bias = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out]))?;
        Ok(ConvIds { weight, bias, stride, padding: k / 2 })
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<(ParamId, ParamId)> {
        let wname = format!("{name}.weight");
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(self.seed, &wname));
        let bound = 1.0 / (inp as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Tensor::from_fn(&[out, inp], |_| T::lit(uniform.sample(&mut rng)));
        let weight = self.params.insert(wname, w)?;
        let bias = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out]))?;
        Ok((weight, bias))
    }

    fn bottleneck(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<BottleneckUnit> {
        let mid = cin / 4;
        Ok(BottleneckUnit {
            reduce: self.conv(&format!("{name}.reduce"), mid, cin, 1, 1)?,
            spatial: self.conv(&format!("{name}.spatial"), mid, mid, 3, stride)?,
            expand: self.conv(&format!("{name}.expand"), cout, mid, 1, 1)?,
            in_channels: cin,
        })
    }
}

fn load<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId, track: bool) -> Var {
    if track {
        tape.param(store, id)
    } else {
        tape.frozen(store, id)
    }
}

impl<T: Scalar> StaircaseModel<T> {
    /// Allocates and initializes every parameter.
    ///
    /// Convolutions draw from `N(0, 2 / fan_in)`, linear layers from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases start at zero. Disabled
    /// fusion paths allocate nothing.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let ns = bb.num_stages();
        let mut b = Builder { params: ParamStore::new(), seed };

        let stem = b.conv("stem", bb.stem_channels, bb.input_channels, 3, 1)?;
        let mut stages = Vec::with_capacity(ns);
        let mut cin = bb.stem_channels;
        for (s, spec) in bb.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks);
            for k in 0..spec.blocks {
                let stride = if k == 0 && spec.downsample { 2 } else { 1 };
                let inp = if k == 0 { cin } else { spec.out_channels };
                blocks.push(b.conv(&format!("stage{}.block{}", s + 1, k + 1), spec.out_channels, inp, 3, stride)?);
            }
            cin = spec.out_channels;
            stages.push(blocks);
        }

        let mut paths = Vec::new();
        for origin in 0..ns.saturating_sub(1) {
            if !config.path_mask[origin] {
                continue;
            }
            let mut units = Vec::with_capacity(ns - 1 - origin);
            for j in origin..ns - 1 {
                let from = bb.stages[j].out_channels;
                let to = &bb.stages[j + 1];
                let stride = if to.downsample { 2 } else { 1 };
                let name = format!("path{}.unit{}", origin + 1, j + 1);
                units.push(b.bottleneck(&name, from, to.out_channels, stride)?);
            }
            paths.push(FusionPath { origin, units });
        }

        let p = bb.feature_width();
        let mut heads = Vec::with_capacity(config.num_heads());
        for h in 0..config.num_heads() {
            let (fc1_weight, fc1_bias) = b.linear(&format!("head{}.fc1", h + 1), HIDDEN_UNITS, p)?;
            let (fc2_weight, fc2_bias) = b.linear(&format!("head{}.fc2", h + 1), 1, HIDDEN_UNITS)?;
            heads.push(HeadIds { fc1_weight, fc1_bias, fc2_weight, fc2_bias });
        }

        Ok(Self {
            config: config.clone(),
            seed,
            params: b.params,
            layout: Layout { stem, stages, paths, heads },
            score_scales: vec![ScoreScale::default(); config.num_heads()],
            preprocess: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_heads(&self) -> usize {
        self.layout.heads.len()
    }

    pub fn head_index(&self, database_id: &str) -> Option<usize> {
        self.config.head_ids.iter().position(|h| h == database_id)
    }

    pub fn score_scale(&self, head: usize) -> ScoreScale {
        self.score_scales[head]
    }

    pub fn score_scales(&self) -> &[ScoreScale] {
        &self.score_scales
    }

    pub fn set_score_scale(&mut self, head: usize, scale: ScoreScale) -> Result<()> {
        self.check_head(head)?;
        if !(scale.offset.is_finite() && scale.scale.is_finite() && scale.scale > 0.0) {
            return Err(Error::invalid(format!("invalid score scale {scale:?}")));
        }
        self.score_scales[head] = scale;
        Ok(())
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.num_heads() {
            return Err(Error::invalid(format!(
                "head index {head} out of range; model has {} heads ({})",
                self.num_heads(),
                self.config.head_ids.join(", ")
            )));
        }
        Ok(())
    }

    /// Parameters of the backbone and all fusion paths.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let heads = self.head_param_set();
        self.params.ids().filter(|id| !heads.contains(id)).collect()
    }

    /// Parameters of one regressor head.
    pub fn head_param_ids(&self, head: usize) -> Vec<ParamId> {
        let h = self.layout.heads[head];
        vec![h.fc1_weight, h.fc1_bias, h.fc2_weight, h.fc2_bias]
    }

    /// Parameters belonging to enabled fusion paths.
    pub fn path_param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for path in &self.layout.paths {
            for u in &path.units {
                for c in [u.reduce, u.spatial, u.expand] {
                    out.extend([c.weight, c.bias]);
                }
            }
        }
        out
    }

    fn head_param_set(&self) -> Vec<ParamId> {
        (0..self.num_heads()).flat_map(|h| self.head_param_ids(h)).collect()
    }

    pub(crate) fn replace_params(&mut self, params: ParamStore<T>) {
        self.params = params;
    }

    /// Input pipeline the model was trained with, when recorded.
    pub fn preprocess(&self) -> Option<&PreprocessConfig> {
        self.preprocess.as_ref()
    }

    pub fn set_preprocess(&mut self, pre: Option<PreprocessConfig>) {
        self.preprocess = pre;
    }

    pub(crate) fn set_score_scales(&mut self, scales: Vec<ScoreScale>) {
        self.score_scales = scales;
    }

    fn conv(&self, tape: &mut Tape<T>, ids: ConvIds, x: Var, track: bool) -> Result<Var> {
        let w = load(tape, &self.params, ids.weight, track);
        let b = load(tape, &self.params, ids.bias, track);
        tape.conv2d(x, w, Some(b), ids.stride, ids.padding)
    }

    /// Runs the stem and every stage, returning each stage's output.
    ///
    /// Every block is a 3x3 convolution followed by ReLU; the first block of a
    /// downsampling stage uses stride 2.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, images: Var, track: bool) -> Result<FeatureMaps> {
        let bb = &self.config.backbone;
        let (_, c, mut h, mut w) = tape.value(images).dims4()?;
        if c != bb.input_channels {
            return Err(Error::shape(format!(
                "images have {c} channels, backbone expects {}",
                bb.input_channels
            )));
        }
        for (s, spec) in bb.stages.iter().enumerate() {
            if spec.downsample {
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!(
                        "input too small: stage {} would downsample a {h}x{w} feature map",
                        s + 1
                    )));
                }
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }

        let stem = self.conv(tape, self.layout.stem, images, track)?;
        let mut x = tape.relu(stem);
        let mut stages = Vec::with_capacity(bb.num_stages());
        for blocks in &self.layout.stages {
            for (k, &ids) in blocks.iter().enumerate() {
                let y = self.conv(tape, ids, x, track)?;
                x = if bb.residual && k > 0 {
                    let sum = tape.add(y, x)?;
                    tape.relu(sum)
                } else {
                    tape.relu(y)
                };
            }
            stages.push(x);
        }
        Ok(FeatureMaps { stages })
    }

    /// 1x1 reduce, ReLU, 3x3 strided, ReLU, 1x1 expand.
    pub fn bottleneck_downfuse(
        &self,
        tape: &mut Tape<T>,
        unit: &BottleneckUnit,
        x: Var,
        track: bool,
    ) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != unit.in_channels {
            return Err(Error::shape(format!(
                "fusion unit expects {} input channels, got {:?}",
                unit.in_channels,
                tape.value(x).shape()
            )));
        }
        let r = self.conv(tape, unit.reduce, x, track)?;
        let r = tape.relu(r);
        let s = self.conv(tape, unit.spatial, r, track)?;
        let s = tape.relu(s);
        self.conv(tape, unit.expand, s, track)
    }

    /// Output of one fusion path: the last unit's result, shaped like the
    /// final stage.
    fn path_contribution(&self, tape: &mut Tape<T>, path: &FusionPath, stages: &[Var], track: bool) -> Result<Var> {
        let last = stages.len() - 1;
        let mut cur = stages[path.origin];
        for (k, unit) in path.units.iter().enumerate() {
            let dest = path.origin + k + 1;
            let down = self.bottleneck_downfuse(tape, unit, cur, track)?;
            if tape.value(down).shape() != tape.value(stages[dest]).shape() {
                return Err(Error::shape(format!(
                    "fusion unit output {:?} does not match stage {} features {:?}",
                    tape.value(down).shape(),
                    dest + 1,
                    tape.value(stages[dest]).shape()
                )));
            }
            cur = if dest == last { down } else { tape.add(down, stages[dest])? };
        }
        Ok(cur)
    }

    /// Merges the per-stage features into the final representation
    /// `F = sum(path contributions) + F_{N_s}`.
    pub fn staircase_fuse(&self, tape: &mut Tape<T>, features: &FeatureMaps, track: bool) -> Result<Var> {
        let ns = self.config.backbone.num_stages();
        if features.stages.len() != ns {
            return Err(Error::shape(format!(
                "expected {ns} stage feature maps, got {}",
                features.stages.len()
            )));
        }
        let mut fused = features.stages[ns - 1];
        for path in &self.layout.paths {
            let contribution = self.path_contribution(tape, path, &features.stages, track)?;
            fused = tape.add(fused, contribution)?;
        }
        Ok(fused)
    }

    /// GAP, linear `P -> 128`, ReLU, linear `128 -> 1`, then the head's
    /// score scale. Returns one score per sample.
    pub fn regress(&self, tape: &mut Tape<T>, fused: Var, head: usize, track: bool) -> Result<Var> {
        self.check_head(head)?;
        let (n, c, _, _) = tape.value(fused).dims4()?;
        let p = self.config.backbone.feature_width();
        if c != p {
            return Err(Error::shape(format!("regressor expects {p} channels, got {c}")));
        }
        let ids = self.layout.heads[head];
        let pooled = tape.global_avg_pool(fused)?;
        let w1 = load(tape, &self.params, ids.fc1_weight, track);
        let b1 = load(tape, &self.params, ids.fc1_bias, track);
        let hidden = tape.linear(pooled, w1, b1)?;
        let hidden = tape.relu(hidden);
        let w2 = load(tape, &self.params, ids.fc2_weight, track);
        let b2 = load(tape, &self.params, ids.fc2_bias, track);
        let out = tape.linear(hidden, w2, b2)?;
        let out = tape.reshape(out, &[n])?;
        let s = self.score_scales[head];
        Ok(tape.affine(out, T::lit(s.scale), T::lit(s.offset)))
    }

    /// Scores for a batch of images under one head.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var, head: usize, track: bool) -> Result<Var> {
        self.check_head(head)?;
        let features = self.backbone_forward(tape, images, track)?;
        let fused = self.staircase_fuse(tape, &features, track)?;
        self.regress(tape, fused, head, track)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, images: &Tensor<T>, head: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, x, head, false)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Inference for every head at once; `out[h][n]`.
    pub fn predict_all_heads(&self, images: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let features = self.backbone_forward(&mut tape, x, false)?;
        let fused = self.staircase_fuse(&mut tape, &features, false)?;
        (0..self.num_heads())
            .map(|h| {
                let y = self.regress(&mut tape, fused, h, false)?;
                Ok(tape.value(y).data().to_vec())
            })
            .collect()
    }

    /// Stage outputs followed by the fused features, as plain tensors.
    pub fn features(&self, images: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let maps = self.backbone_forward(&mut tape, x, false)?;
        let fused = self.staircase_fuse(&mut tape, &maps, false)?;
        let stages = maps.stages.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((stages, tape.value(fused).clone()))
    }

    /// Fusion units of the path originating at zero-based stage `origin`.
    pub fn path_units(&self, origin: usize) -> Option<&[BottleneckUnit]> {
        self.layout.paths.iter().find(|p| p.origin == origin).map(|p| p.units.as_slice())
    }

    pub(crate) fn conv_ids(unit: &BottleneckUnit) -> [(ParamId, ParamId); 3] {
        [
            (unit.reduce.weight, unit.reduce.bias),
            (unit.spatial.weight, unit.spatial.bias),
            (unit.expand.weight, unit.expand.bias),
        ]
    }

    /// Weight and bias ids of the reduce, spatial and expand convolutions.
    pub fn unit_param_ids(unit: &BottleneckUnit) -> Vec<ParamId> {
        Self::conv_ids(unit).iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Stride of the 3x3 convolution inside a unit.
    pub fn unit_stride(unit: &BottleneckUnit) -> usize {
        unit.spatial.stride
    }
}
