//! Model checkpoints.
//!
//! Layout of a checkpoint file, all integers little-endian:
//!
//! ```text
//! "ODENORM1"                      8-byte magic
//! u64                             manifest length in bytes
//! manifest                        UTF-8, one `key=value` per line
//! u32                             tensor count
//! per tensor: u32 name length, name, u8 trainable, u32 ndim, u64 × ndim dims
//! f64 values of every tensor, registry order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::TensorStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ODENORM1";

/// Text header of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: ModelConfig,
    pub epoch: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let spec = c.train_spec;
        format!(
            "arch={}\nschedule={}\nbase_channels={}\nin_channels={}\nnum_classes={}\ntrain_spec={}:{}\ntime_channel={}\nseed={}\nepoch={}\n",
            c.arch,
            c.schedule,
            c.base_channels,
            c.in_channels,
            c.num_classes,
            spec.scheme(),
            spec.n_evals(),
            c.time_channel,
            c.seed,
            self.epoch
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: `{line}` is not key=value", no + 1)))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("manifest is missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest `{k}` is not an integer")))
        };
        let bad = |e: Error| Error::Checkpoint(e.to_string());
        let config = ModelConfig {
            arch: get("arch")?.parse().map_err(bad)?,
            schedule: get("schedule")?.parse().map_err(bad)?,
            base_channels: num("base_channels")? as usize,
            in_channels: num("in_channels")? as usize,
            num_classes: num("num_classes")? as usize,
            train_spec: get("train_spec")?.parse().map_err(bad)?,
            time_channel: get("time_channel")?
                .parse()
                .map_err(|_| Error::Checkpoint("manifest `time_channel` is not a boolean".into()))?,
            seed: num("seed")?,
        };
        Ok(Manifest {
            config,
            epoch: num("epoch")? as usize,
        })
    }
}

pub fn encode(model: &Model, epoch: usize) -> Vec<u8> {
    let manifest = Manifest {
        config: *model.config(),
        epoch,
    }
    .to_text();
    let store = model.store();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::from(store.is_trainable(id)));
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for id in store.ids() {
        for v in store.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds a model and returns it with the stored epoch.
pub fn decode(bytes: &[u8]) -> Result<(Model, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic: not an ODENORM1 checkpoint".into()));
    }
    let mlen = r.u64("manifest length")? as usize;
    let text = std::str::from_utf8(r.take(mlen, "manifest")?)
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let manifest = Manifest::parse(text)?;
    let count = r.u32("tensor count")? as usize;
    let mut index = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let trainable = r.take(1, "trainable flag")?[0] != 0;
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        index.push((name, trainable, shape));
    }

    let mut model = Model::build(manifest.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let store: &mut TensorStore = model.store_mut();
    if store.len() != count {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors, {} expects {}",
            manifest.config.arch,
            store.len()
        )));
    }
    for (id, (name, trainable, shape)) in store.ids().collect::<Vec<_>>().into_iter().zip(index) {
        if store.name(id) != name || store.is_trainable(id) != trainable {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` found where `{}` was expected",
                store.name(id)
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.set(id, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((model, manifest.epoch))
}

pub fn save(model: &Model, epoch: usize, path: &Path) -> Result<()> {
    fs::write(path, encode(model, epoch)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
