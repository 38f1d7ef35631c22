//! Binary checkpoint format.
//!
//! ```text
//! magic    b"CTLCKPT\0"
//! version  u32
//! meta_len u32, meta JSON (config echo, epoch, validation accuracy,
//!          categories, feature spec, RNG states, optimizer step, history)
//! count    u32
//! count x tensor:
//!     name_len u32, name bytes
//!     ndim u32, dims u64 x ndim
//!     values f64 little-endian
//! crc32    u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, History, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::model::{CompatibilityHead, Projection};

const MAGIC: &[u8; 8] = b"CTLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Validation accuracy measured at `epoch`, if validation ran then.
    pub val_accuracy: Option<f64>,
    pub categories: Vec<String>,
    pub head: CompatibilityHead,
    pub adam: Adam,
    pub sampler_rng: RngState,
    pub dropout_rng: RngState,
    pub history: History,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: String,
    epoch: usize,
    val_accuracy: Option<f64>,
    categories: Vec<String>,
    spec: FeatureSpec,
    embed_dim: usize,
    adam: super::AdamParams,
    adam_step: u64,
    sampler_rng: RngState,
    dropout_rng: RngState,
    history: History,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

type Tensor = (String, Vec<usize>, Vec<f64>);

fn projection_tensors(prefix: &str, p: &Projection) -> Vec<Tensor> {
    let m = |n: &str, a: &Array2<f64>| (format!("{prefix}.{n}"), a.shape().to_vec(), a.iter().copied().collect());
    let v = |n: &str, a: &Array1<f64>| (format!("{prefix}.{n}"), vec![a.len()], a.to_vec());
    vec![
        m("w1", &p.w1),
        v("b1", &p.b1),
        v("gamma", &p.gamma),
        v("beta", &p.beta),
        v("running_mean", &p.running_mean),
        v("running_var", &p.running_var),
        m("w2", &p.w2),
        v("b2", &p.b2),
    ]
}

impl Checkpoint {
    fn tensors(&self) -> Vec<Tensor> {
        let h = &self.head;
        let mut out = projection_tensors("global", &h.global);
        out.extend(projection_tensors("local", &h.local));
        out.extend(projection_tensors("attention", &h.attention));
        out.push(("categories".into(), h.categories.shape().to_vec(), h.categories.iter().copied().collect()));
        for (i, name) in super::parameter_names().iter().enumerate() {
            out.push((format!("adam.m.{name}"), vec![self.adam.m[i].len()], self.adam.m[i].clone()));
            out.push((format!("adam.v.{name}"), vec![self.adam.v[i].len()], self.adam.v[i].clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            config: self.config.to_text(),
            epoch: self.epoch,
            val_accuracy: self.val_accuracy,
            categories: self.categories.clone(),
            spec: self.head.spec,
            embed_dim: self.head.embed_dim,
            adam: self.adam.params,
            adam_step: self.adam.step,
            sampler_rng: self.sampler_rng.clone(),
            dropout_rng: self.dropout_rng.clone(),
            history: self.history.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("meta serializes");
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, tensors.len() as u32);
        for (name, shape, values) in &tensors {
            put_tensor(&mut out, name, shape, values);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::FormatVersionMismatch { found: 0, expected: CHECKPOINT_VERSION });
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        if buf.len() < 16 {
            return Err(Error::ChecksumMismatch("checkpoint truncated".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::ChecksumMismatch("checkpoint".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::ChecksumMismatch(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::ChecksumMismatch("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let values = r.f64s(n)?;
            tensors.insert(name, (shape, values));
        }
        if r.pos != body.len() {
            return Err(Error::ChecksumMismatch("trailing bytes in checkpoint".into()));
        }

        let config = TrainConfig::from_text(&meta.config)?;
        let mut t = TensorTable(tensors);
        let head = CompatibilityHead {
            spec: meta.spec,
            embed_dim: meta.embed_dim,
            global: t.projection("global")?,
            local: t.projection("local")?,
            attention: t.projection("attention")?,
            categories: t.matrix("categories")?,
        };
        let mut adam = Adam { params: meta.adam, step: meta.adam_step, m: Vec::new(), v: Vec::new() };
        for name in super::parameter_names() {
            adam.m.push(t.take(&format!("adam.m.{name}"))?.1);
            adam.v.push(t.take(&format!("adam.v.{name}"))?.1);
        }
        if let Some(extra) = t.0.keys().next() {
            return Err(Error::Shape(format!("unexpected checkpoint tensor {extra}")));
        }
        Ok(Self {
            config,
            epoch: meta.epoch,
            val_accuracy: meta.val_accuracy,
            categories: meta.categories,
            head,
            adam,
            sampler_rng: meta.sampler_rng,
            dropout_rng: meta.dropout_rng,
            history: meta.history,
        })
    }
}

struct TensorTable(BTreeMap<String, (Vec<usize>, Vec<f64>)>);

impl TensorTable {
    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        self.0.remove(name).ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))
    }

    fn matrix(&mut self, name: &str) -> Result<Array2<f64>> {
        let (shape, values) = self.take(name)?;
        if shape.len() != 2 {
            return Err(Error::Shape(format!("tensor {name} is not a matrix")));
        }
        Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| Error::Shape(e.to_string()))
    }

    fn vector(&mut self, name: &str) -> Result<Array1<f64>> {
        let (shape, values) = self.take(name)?;
        if shape.len() != 1 {
            return Err(Error::Shape(format!("tensor {name} is not a vector")));
        }
        Ok(Array1::from(values))
    }

    fn projection(&mut self, p: &str) -> Result<Projection> {
        Ok(Projection {
            w1: self.matrix(&format!("{p}.w1"))?,
            b1: self.vector(&format!("{p}.b1"))?,
            gamma: self.vector(&format!("{p}.gamma"))?,
            beta: self.vector(&format!("{p}.beta"))?,
            running_mean: self.vector(&format!("{p}.running_mean"))?,
            running_var: self.vector(&format!("{p}.running_var"))?,
            w2: self.matrix(&format!("{p}.w2"))?,
            b2: self.vector(&format!("{p}.b2"))?,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::ChecksumMismatch(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Shape("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&buf)
}
