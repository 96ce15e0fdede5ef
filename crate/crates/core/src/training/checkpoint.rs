//! Binary checkpoints.
//!
//! Layout, all little-endian: magic `SIGC`, u32 version, u64 config hash,
//! u32-prefixed config text, u64 completed epochs, u64 Adam step, u64 RNG
//! seed, u128 RNG word position, u32 tensor count, then per tensor a
//! u32-prefixed UTF-8 name, u32 rank, u64 dims and f64 data.

use std::path::Path;

use super::{Adam, Model, TrainConfig, TrainState};
use crate::config::KvFile;
use crate::datagen::ExpressionNorm;
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SIGC";

/// A model plus the state needed to continue training it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: TrainState,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let model = &ck.model;
    let store = &model.store;
    let text = model.cfg.to_kv().to_text();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.cfg.hash().to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(ck.state.epoch as u64).to_le_bytes());
    buf.extend_from_slice(&ck.state.adam.step.to_le_bytes());
    buf.extend_from_slice(&ck.state.rng.seed().to_le_bytes());
    buf.extend_from_slice(&ck.state.rng.word_pos().to_le_bytes());

    let n = 3 * store.len() + 2;
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for id in store.ids() {
        let t = store.get(id);
        let name = store.name(id);
        put_tensor(&mut buf, &format!("param/{name}"), t.shape(), t.data());
        put_tensor(
            &mut buf,
            &format!("adam.m/{name}"),
            t.shape(),
            &ck.state.adam.m[id.index()],
        );
        put_tensor(
            &mut buf,
            &format!("adam.v/{name}"),
            t.shape(),
            &ck.state.adam.v[id.index()],
        );
    }
    let g = model.norm.mean.len();
    put_tensor(&mut buf, "norm/mean", &[g], &model.norm.mean);
    put_tensor(&mut buf, "norm/std", &[g], &model.norm.std);
    buf
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> std::result::Result<u128, String> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }

    fn tensor(&mut self) -> std::result::Result<(String, Tensor), String> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hash = r.u64()?;
    let text = r.string()?;
    let cfg = TrainConfig::from_kv(&KvFile::parse(&text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if cfg.hash() != hash {
        return Err("config hash does not match the embedded config".into());
    }
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let rng = Rng::restore(r.u64()?, r.u128()?);
    let count = r.u32()? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        tensors.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    let mut get = |name: &str| tensors.remove(name).ok_or_else(|| format!("missing tensor {name}"));
    let norm = ExpressionNorm {
        mean: get("norm/mean")?.into_data(),
        std: get("norm/std")?.into_data(),
    };
    let mut model = Model::new(cfg, norm).map_err(|e| e.to_string())?;
    let mut adam = Adam::new(&model.store, model.cfg.beta1, model.cfg.beta2, model.cfg.adam_eps);
    adam.step = step;
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let value = get(&format!("param/{name}"))?;
        model.store.set(id, &value).map_err(|e| format!("{name}: {e}"))?;
        let m = get(&format!("adam.m/{name}"))?;
        let v = get(&format!("adam.v/{name}"))?;
        if m.numel() != value.numel() || v.numel() != value.numel() {
            return Err(format!("{name}: optimizer moment size mismatch"));
        }
        adam.m[id.index()] = m.into_data();
        adam.v[id.index()] = v.into_data();
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(format!("unexpected tensor {extra}"));
    }
    Ok(Checkpoint {
        model,
        state: TrainState { epoch, adam, rng },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_checkpoint(&buf).map_err(|msg| Error::format(path, msg))
}
