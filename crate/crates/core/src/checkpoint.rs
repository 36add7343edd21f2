//! Versioned key→tensor archive holding a full [`TrainState`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    7 bytes  "PENNET1"
//! version  u32
//! config   u32 length + UTF-8 JSON of the TrainConfig
//! step     u64
//! adam_t   u64 generator, u64 discriminator
//! count    u32
//! count × { u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f64 data }
//! ```
//!
//! Tensor names are prefixed `g/`, `d/`, `g.adam.m/`, `g.adam.v/`,
//! `d.adam.m/`, `d.adam.v/`, and `d.sn.u/<layer>`, `d.sn.v/<layer>` for the
//! power-iteration vectors.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 7] = b"PENNET1";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_store(out: &mut Vec<u8>, prefix: &str, store: &ParamStore) {
    for (name, t) in store.iter() {
        put_tensor(out, &format!("{prefix}/{name}"), t);
    }
}

/// Serializes `state` to bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let config = serde_json::to_vec(&state.config)?;
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.g_opt.t);
    put_u64(&mut out, state.d_opt.t);

    let sn = state.discriminator.spectral();
    let count = 3 * state.generator.params.len() + 3 * state.discriminator.params.len() + 2 * sn.len();
    put_u32(&mut out, count as u32);
    put_store(&mut out, "g", &state.generator.params);
    put_store(&mut out, "g.adam.m", &state.g_opt.m);
    put_store(&mut out, "g.adam.v", &state.g_opt.v);
    put_store(&mut out, "d", &state.discriminator.params);
    put_store(&mut out, "d.adam.m", &state.d_opt.m);
    put_store(&mut out, "d.adam.v", &state.d_opt.v);
    for (i, s) in sn.iter().enumerate() {
        put_tensor(&mut out, &format!("d.sn.u/{i}"), &Tensor::from_vec(&[s.u.len()], s.u.clone()));
        put_tensor(&mut out, &format!("d.sn.v/{i}"), &Tensor::from_vec(&[s.v.len()], s.v.clone()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)))
    }
}

fn fill_store(
    store: &mut ParamStore,
    prefix: &str,
    tensors: &mut BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, slot) in store.iter_mut() {
        let key = format!("{prefix}/{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{key}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(len)?)?;
    let step = r.u64()?;
    let (g_t, d_t) = (r.u64()?, r.u64()?);
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        tensors.insert(name, t);
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }

    let mut state = TrainState::new(config)?;
    state.step = step;
    state.g_opt.t = g_t;
    state.d_opt.t = d_t;
    fill_store(&mut state.generator.params, "g", &mut tensors)?;
    fill_store(&mut state.g_opt.m, "g.adam.m", &mut tensors)?;
    fill_store(&mut state.g_opt.v, "g.adam.v", &mut tensors)?;
    fill_store(&mut state.discriminator.params, "d", &mut tensors)?;
    fill_store(&mut state.d_opt.m, "d.adam.m", &mut tensors)?;
    fill_store(&mut state.d_opt.v, "d.adam.v", &mut tensors)?;
    for (i, s) in state.discriminator.spectral_mut().iter_mut().enumerate() {
        for (kind, vec) in [("u", &mut s.u), ("v", &mut s.v)] {
            let key = format!("d.sn.{kind}/{i}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.numel() != vec.len() {
                return Err(Error::Checkpoint(format!("tensor `{key}` has the wrong length")));
            }
            *vec = t.into_data();
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Short identifier for a loaded model: config hash prefix and step.
pub fn model_id(state: &TrainState) -> String {
    format!("pennet-{}-step{}", &state.config_hash()[..12], state.step)
}
