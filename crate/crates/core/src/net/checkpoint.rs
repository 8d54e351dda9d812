//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SIQA"                      4 bytes magic
//! version                     u16
//! doc_len                     u64, followed by doc_len bytes of UTF-8 JSON
//! record_count                u64
//! per record:
//!   name_len                  u32, followed by name bytes
//!   rank                      u32
//!   extents                   rank x u64
//!   values                    product(extents) x f64, row-major
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ScoreScale, StaircaseModel};
use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SIQA";
pub const FORMAT_VERSION: u16 = 1;

/// A named tensor stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, tensor: Tensor<f64>) -> Self {
        Self { name: name.into(), tensor }
    }
}

pub fn encode(doc: &str, records: &[Record]) -> Vec<u8> {
    let payload: usize = records.iter().map(|r| 16 + r.name.len() + 8 * (r.tensor.rank() + r.tensor.len())).sum();
    let mut out = Vec::with_capacity(22 + doc.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
    out.extend_from_slice(doc.as_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
        for &d in r.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a SIQA checkpoint".into()));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let doc_len = r.len("document length")?;
    let doc = std::str::from_utf8(r.take(doc_len, "document")?)
        .map_err(|e| Error::Checkpoint(format!("document is not UTF-8: {e}")))?
        .to_owned();
    let count = r.len("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}` extents overflow")))?;
        let raw = r.take(n.saturating_mul(8), "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
        records.push(Record { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((doc, records))
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ModelDoc {
    pub config: ModelConfig,
    pub seed: u64,
    pub score_scales: Vec<ScoreScale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessConfig>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step/";

impl<T: Scalar> StaircaseModel<T> {
    pub(crate) fn doc(&self) -> ModelDoc {
        ModelDoc {
            config: self.config().clone(),
            seed: self.seed(),
            score_scales: self.score_scales().to_vec(),
            preprocess: self.preprocess().cloned(),
        }
    }

    /// Parameter values as records, optionally with Adam state.
    pub(crate) fn records(&self, prefix: &str, with_optimizer: bool) -> Vec<Record> {
        let mut out = Vec::new();
        for p in self.params.iter() {
            out.push(Record::new(format!("{prefix}{}", p.name), p.value.cast()));
            if with_optimizer {
                let shape = p.value.shape();
                let m = Tensor::new(shape.to_vec(), p.adam.m.iter().map(|v| v.as_f64()).collect()).expect("shape");
                let v = Tensor::new(shape.to_vec(), p.adam.v.iter().map(|v| v.as_f64()).collect()).expect("shape");
                out.push(Record::new(format!("{prefix}{ADAM_M}{}", p.name), m));
                out.push(Record::new(format!("{prefix}{ADAM_V}{}", p.name), v));
                out.push(Record::new(
                    format!("{prefix}{ADAM_STEP}{}", p.name),
                    Tensor::scalar(p.adam.step as f64),
                ));
            }
        }
        out
    }

    /// Rebuilds the parameter layout from `doc` and fills values from records.
    pub(crate) fn restore(
        doc: &ModelDoc,
        records: &HashMap<&str, &Tensor<f64>>,
        prefix: &str,
        with_optimizer: bool,
    ) -> Result<Self> {
        let mut model = Self::build(&doc.config, doc.seed)?;
        if doc.score_scales.len() != model.num_heads() {
            return Err(Error::Checkpoint("score scale count does not match head count".into()));
        }
        model.set_score_scales(doc.score_scales.clone());
        model.set_preprocess(doc.preprocess.clone());
        let mut params: ParamStore<T> = model.params().clone();
        for p in params.iter_mut() {
            let fetch = |key: String, shape: &[usize]| -> Result<&Tensor<f64>> {
                let t = records
                    .get(key.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing record `{key}`")))?;
                if t.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "record `{key}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            };
            p.value = fetch(format!("{prefix}{}", p.name), p.value.shape())?.cast();
            if with_optimizer {
                let shape = p.value.shape().to_vec();
                p.adam.m = fetch(format!("{prefix}{ADAM_M}{}", p.name), &shape)?.data().iter().map(|&v| T::lit(v)).collect();
                p.adam.v = fetch(format!("{prefix}{ADAM_V}{}", p.name), &shape)?.data().iter().map(|&v| T::lit(v)).collect();
                p.adam.step = fetch(format!("{prefix}{ADAM_STEP}{}", p.name), &[1])?.data()[0] as u64;
            }
        }
        model.replace_params(params);
        Ok(model)
    }

    /// Serializes configuration, seed, score scales and parameter values.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let doc = serde_json::to_string(&self.doc()).expect("model doc serializes");
        encode(&doc, &self.records("", false))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (doc, records) = decode(bytes)?;
        let doc: ModelDoc = serde_json::from_str(&doc)
            .map_err(|source| Error::Json { context: "checkpoint document".into(), source })?;
        let map: HashMap<&str, &Tensor<f64>> = records.iter().map(|r| (r.name.as_str(), &r.tensor)).collect();
        if map.len() != records.len() {
            return Err(Error::Checkpoint("duplicate record names".into()));
        }
        let model = Self::restore(&doc, &map, "", false)?;
        if records.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} records, model expects {}",
                records.len(),
                model.params().len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::BackboneConfig;

    fn model() -> StaircaseModel<f64> {
        let cfg = ModelConfig::staircase(BackboneConfig::plain(4, &[4, 8, 16]), vec!["a".into(), "b".into()]);
        StaircaseModel::build(&cfg, 11).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut m = model();
        m.set_score_scale(1, ScoreScale { offset: 51.123456789, scale: 0.1 + 0.2 }).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let back = StaircaseModel::<f64>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, StaircaseModel { params: back.params.clone(), ..m.clone() });
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode("{}", &[Record::new("x", Tensor::from_vec(vec![1.0, 2.0]))]);
        assert_eq!(&bytes[..4], b"SIQA");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        assert_eq!(&bytes[14..16], b"{}");
        // count + name_len + name + rank + extent + 2 values
        assert_eq!(bytes.len(), 16 + 8 + 4 + 1 + 4 + 8 + 16);
        let (doc, recs) = decode(&bytes).unwrap();
        assert_eq!(doc, "{}");
        assert_eq!(recs[0].tensor.data(), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_corrupt_input() {
        let bytes = model().to_checkpoint_bytes();
        assert!(StaircaseModel::<f64>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(StaircaseModel::<f64>::from_checkpoint_bytes(&bad).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(StaircaseModel::<f64>::from_checkpoint_bytes(&ver).is_err());
    }
}
