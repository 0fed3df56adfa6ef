//! Binary checkpoint container.
//!
//! Layout (little-endian): `"MXPP"`, `u32` version, `u32` tensor count, then
//! per tensor `u16` name length, UTF-8 name, `u8` dtype (0 = f32), `u8` rank,
//! `rank × u32` extents and the raw values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, Variant};
use crate::tensor::Tensor;

use super::adam::AdamState;

pub const MAGIC: &[u8; 4] = b"MXPP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";
const META_PREFIX: &str = "meta.";

pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype} for {name}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", buf.len() - r.pos)));
    }
    Ok(out)
}

/// Model weights, optimizer moments and enough metadata to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
}

fn variant_code(v: Variant) -> f32 {
    Variant::ALL.iter().position(|&x| x == v).unwrap() as f32
}

impl Checkpoint {
    fn meta(&self) -> Vec<(&'static str, f32)> {
        let m = &self.model;
        vec![
            ("step", self.step as f32),
            ("model.k", m.k as f32),
            ("model.c_bar", m.c_bar as f32),
            ("model.blocks_per_expert", m.blocks_per_expert as f32),
            ("model.pool", m.pool as f32),
            ("model.ffn_mult", m.ffn_mult as f32),
            ("model.n_train_fonts", m.n_train_fonts as f32),
            ("model.variant", variant_code(m.variant)),
        ]
    }

    /// All tensors in sorted name order.
    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut all = BTreeMap::new();
        for (k, v) in self.meta() {
            all.insert(format!("{META_PREFIX}{k}"), Tensor::scalar(v));
        }
        for (n, t) in self.params.iter() {
            all.insert(n.clone(), t.clone());
        }
        for (n, t) in self.adam.m.iter() {
            all.insert(format!("{M_PREFIX}{n}"), t.clone());
        }
        for (n, t) in self.adam.v.iter() {
            all.insert(format!("{V_PREFIX}{n}"), t.clone());
        }
        all.into_iter().collect()
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        let mut meta = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix(META_PREFIX) {
                if t.len() != 1 {
                    return Err(Error::Format(format!("metadata {name} must be a single value")));
                }
                meta.insert(rest.to_string(), t.data()[0]);
            } else if let Some(rest) = name.strip_prefix(M_PREFIX) {
                m.insert(rest, t);
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                v.insert(rest, t);
            } else {
                params.insert(name, t);
            }
        }
        let get = |k: &str| -> Result<usize> {
            let x = *meta.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks metadata {k}")))?;
            if x < 0.0 || x.fract() != 0.0 {
                return Err(Error::Format(format!("metadata {k} is not a count: {x}")));
            }
            Ok(x as usize)
        };
        let variant =
            *Variant::ALL.get(get("model.variant")?).ok_or_else(|| Error::Format("unknown variant code".into()))?;
        let model = ModelConfig {
            k: get("model.k")?,
            c_bar: get("model.c_bar")?,
            blocks_per_expert: get("model.blocks_per_expert")?,
            pool: get("model.pool")?,
            ffn_mult: get("model.ffn_mult")?,
            n_train_fonts: get("model.n_train_fonts")?,
            variant,
        };
        model.validate().map_err(|e| Error::Format(format!("checkpoint model description: {e}")))?;
        let same_names = |a: &ParamStore| a.names().eq(params.names());
        if !same_names(&m) || !same_names(&v) {
            return Err(Error::Format("optimizer moments do not match the parameter set".into()));
        }
        Ok(Checkpoint { step: get("step")?, model, params, adam: AdamState { m, v } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_tensors(&self.to_tensors())?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tensors(decode_tensors(&bytes)?)
    }
}
