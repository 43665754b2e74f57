//! Binary persistence: model checkpoints (config snapshot, named parameter
//! blobs, epoch, optimizer moments) and embedding exports. Both formats are
//! little-endian with magic headers; corrupt files report the byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::model::{ModelConfig, TFoodModel};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const EMBEDDING_MAGIC: &[u8; 4] = b"TFEB";
pub const EMBEDDING_VERSION: u32 = 1;

fn fmt_err(what: &str, offset: usize) -> TensorError {
    TensorError::InvalidInput(format!("format error at offset {offset}: {what}"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fmt_err(what, self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| fmt_err(what, self.pos - 8))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.bytes(n.checked_mul(8).ok_or_else(|| fmt_err(what, self.pos))?, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let at = self.pos;
        String::from_utf8(self.bytes(n, what)?.to_vec()).map_err(|_| fmt_err(what, at))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(fmt_err("trailing bytes", self.pos));
        }
        Ok(())
    }
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    push_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub adam_step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Checkpoint {
    pub fn capture(model: &TFoodModel, epoch: u64, adam: &Adam) -> Self {
        let params = model
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.shape().to_vec(), p.data()))
            .collect();
        Checkpoint {
            config: model.cfg.clone(),
            epoch,
            params,
            adam_step: adam.step_count,
            moments: adam.moments.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        push_string(&mut out, &serde_json::to_string(&self.config).expect("config serializes"));
        push_u64(&mut out, self.epoch);
        push_u64(&mut out, self.adam_step);
        push_u64(&mut out, self.params.len() as u64);
        for (name, shape, data) in &self.params {
            push_string(&mut out, name);
            push_u64(&mut out, shape.len() as u64);
            for &d in shape {
                push_u64(&mut out, d as u64);
            }
            push_f64s(&mut out, data);
            match self.moments.get(name) {
                Some(m) => {
                    out.push(1);
                    push_f64s(&mut out, &m.m);
                    push_f64s(&mut out, &m.v);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(fmt_err("bad magic", 0));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err("unsupported version", 4));
        }
        let cfg_at = r.pos;
        let cfg_json = r.string("config")?;
        let config: ModelConfig =
            serde_json::from_str(&cfg_json).map_err(|_| fmt_err("bad config json", cfg_at))?;
        let epoch = r.u64("epoch")?;
        let adam_step = r.u64("adam step")?;
        let n_params = r.len("param count")?;
        let mut params = Vec::with_capacity(n_params);
        let mut moments = BTreeMap::new();
        for _ in 0..n_params {
            let name = r.string("param name")?;
            let ndims = r.len("param rank")?;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.len("param dim")?);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64_vec(numel, "param data")?;
            let has_moments = r.bytes(1, "moment flag")?[0];
            if has_moments == 1 {
                let m = r.f64_vec(numel, "first moment")?;
                let v = r.f64_vec(numel, "second moment")?;
                moments.insert(name.clone(), Moments { m, v });
            } else if has_moments != 0 {
                return Err(fmt_err("bad moment flag", r.pos - 1));
            }
            params.push((name, shape, data));
        }
        r.done()?;
        Ok(Checkpoint {
            config,
            epoch,
            params,
            adam_step,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| TensorError::InvalidInput(format!("write checkpoint: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)
            .map_err(|e| TensorError::InvalidInput(format!("read checkpoint: {e}")))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the model (from the config snapshot) and the optimizer state.
    pub fn restore(&self, learning_rate: f64) -> Result<(TFoodModel, Adam)> {
        let model = TFoodModel::new(self.config.clone(), 0);
        let live: BTreeMap<String, Tensor> = model.params().into_iter().collect();
        if live.len() != self.params.len() {
            return Err(TensorError::InvalidInput(format!(
                "checkpoint has {} params, model expects {}",
                self.params.len(),
                live.len()
            )));
        }
        for (name, shape, data) in &self.params {
            let p = live.get(name).ok_or_else(|| {
                TensorError::InvalidInput(format!("checkpoint param {name:?} not in model"))
            })?;
            if p.shape() != shape.as_slice() {
                return Err(TensorError::InvalidInput(format!(
                    "shape mismatch for {name}: checkpoint {shape:?}, model {:?}",
                    p.shape()
                )));
            }
            p.set_data(data);
        }
        let mut adam = Adam::new(AdamConfig::new(learning_rate));
        adam.step_count = self.adam_step;
        adam.moments = self.moments.clone();
        Ok((model, adam))
    }
}

/// Embedding export: header (magic, version, N, d), N recipe rows, N image
/// rows, N pair ids. Rows are f64 little-endian.
#[derive(Debug)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub e_r: Vec<f64>,
    pub e_v: Vec<f64>,
    pub pair_ids: Vec<u64>,
}

impl EmbeddingFile {
    pub fn count(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.count();
        assert_eq!(self.e_r.len(), n * self.dim);
        assert_eq!(self.e_v.len(), n * self.dim);
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        push_u64(&mut out, n as u64);
        push_u64(&mut out, self.dim as u64);
        push_f64s(&mut out, &self.e_r);
        push_f64s(&mut out, &self.e_v);
        for &id in &self.pair_ids {
            push_u64(&mut out, id);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != EMBEDDING_MAGIC {
            return Err(fmt_err("bad magic", 0));
        }
        if r.u32("version")? != EMBEDDING_VERSION {
            return Err(fmt_err("unsupported version", 4));
        }
        let n = r.len("count")?;
        let d = r.len("dim")?;
        let numel = n
            .checked_mul(d)
            .ok_or_else(|| fmt_err("count * dim overflow", 8))?;
        let e_r = r.f64_vec(numel, "recipe rows")?;
        let e_v = r.f64_vec(numel, "image rows")?;
        let mut pair_ids = Vec::with_capacity(n);
        for _ in 0..n {
            pair_ids.push(r.u64("pair id")?);
        }
        r.done()?;
        Ok(EmbeddingFile {
            dim: d,
            e_r,
            e_v,
            pair_ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| TensorError::InvalidInput(format!("write embeddings: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)
            .map_err(|e| TensorError::InvalidInput(format!("read embeddings: {e}")))?;
        Self::from_bytes(&buf)
    }
}
