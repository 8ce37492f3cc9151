//! Binary checkpoints: `HBMC`, u32 version, u64 manifest length, JSON manifest,
//! then little-endian `f32` blobs at the offsets the manifest lists.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::RunningStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::train::Sgd;

pub const MAGIC: &[u8; 4] = b"HBMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Momentum,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub optim: Sgd,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `magic + version + u64 manifest length + manifest` into a fresh buffer.
pub(crate) fn header(magic: &[u8; 4], version: u32, manifest: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + manifest.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest);
    out
}

/// Splits a file into its manifest bytes and blob section after checking magic and version.
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", &bytes[..4], std::str::from_utf8(magic).unwrap_or("?"))));
    }
    let v = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if v != version {
        return Err(Error::Format(format!("unsupported version {v}, expected {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[16..];
    if len > rest.len() as u64 {
        return Err(Error::Format(format!("manifest length {len} exceeds file size")));
    }
    Ok(rest.split_at(len as usize))
}

pub(crate) fn push_f32<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
    }
}

pub(crate) fn read_f32<T: Scalar>(blob: &[u8]) -> Vec<T> {
    blob.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect()
}

pub fn to_bytes<T: Scalar>(model: &Model<T>, optim: &Sgd) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blobs: Vec<u8> = Vec::new();
    let mut push = |name: &str, kind, shape: Vec<usize>, values: &[T]| {
        tensors.push(TensorEntry { name: name.to_string(), kind, shape, offset: blobs.len() as u64 });
        push_f32(&mut blobs, values);
    };
    let store = model.store();
    for p in store.params() {
        push(&p.name, TensorKind::Param, p.value.shape().to_vec(), p.value.data());
    }
    for p in store.params() {
        push(&p.name, TensorKind::Momentum, p.value.shape().to_vec(), &p.momentum);
    }
    for s in store.stats() {
        push(&s.name, TensorKind::RunningMean, vec![s.stats.channels()], &s.stats.mean);
        push(&s.name, TensorKind::RunningVar, vec![s.stats.channels()], &s.stats.var);
    }
    let manifest = Manifest { config: model.config().clone(), optim: *optim, tensors };
    let mut out = header(MAGIC, VERSION, &serde_json::to_vec(&manifest)?);
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, Sgd)> {
    let (manifest, blobs) = split_header(bytes, MAGIC, VERSION)?;
    let manifest: Manifest =
        serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
    let mut model = Model::<T>::build(&manifest.config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Format(format!("checkpoint config rejected: {e}")))?;

    let mut expected = 0u64;
    let mut by_key: BTreeMap<(TensorKind, String), (Vec<usize>, Vec<T>)> = BTreeMap::new();
    for t in &manifest.tensors {
        if t.offset != expected {
            return Err(Error::Format(format!("tensor {} at offset {}, expected {expected}", t.name, t.offset)));
        }
        let len = t.shape.iter().product::<usize>() as u64 * 4;
        let end = expected + len;
        if end > blobs.len() as u64 {
            return Err(Error::Format(format!("truncated blob for {}", t.name)));
        }
        let values = read_f32(&blobs[expected as usize..end as usize]);
        if by_key.insert((t.kind, t.name.clone()), (t.shape.clone(), values)).is_some() {
            return Err(Error::Format(format!("{} listed twice", t.name)));
        }
        expected = end;
    }
    if expected != blobs.len() as u64 {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", blobs.len() as u64 - expected)));
    }

    let wanted: BTreeSet<(TensorKind, String)> = model
        .store()
        .params()
        .iter()
        .flat_map(|p| [(TensorKind::Param, p.name.clone()), (TensorKind::Momentum, p.name.clone())])
        .chain(
            model
                .store()
                .stats()
                .iter()
                .flat_map(|s| [(TensorKind::RunningMean, s.name.clone()), (TensorKind::RunningVar, s.name.clone())]),
        )
        .collect();
    let found: BTreeSet<(TensorKind, String)> = by_key.keys().cloned().collect();
    if wanted != found {
        let missing: Vec<_> = wanted.difference(&found).map(|(_, n)| n.as_str()).take(3).collect();
        let extra: Vec<_> = found.difference(&wanted).map(|(_, n)| n.as_str()).take(3).collect();
        return Err(Error::Format(format!("tensor name set mismatch: missing {missing:?}, unexpected {extra:?}")));
    }

    let mut take = |kind, name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let (s, v) = by_key.remove(&(kind, name.to_string())).expect("name sets equal");
        if s != shape {
            return Err(Error::Format(format!("{name}: stored shape {s:?}, model expects {shape:?}")));
        }
        Ok(v)
    };
    let store = model.store_mut();
    for p in store.params_mut() {
        let shape = p.value.shape().to_vec();
        let value = take(TensorKind::Param, &p.name, &shape)?;
        p.value.data_mut().copy_from_slice(&value);
        p.momentum = take(TensorKind::Momentum, &p.name, &shape)?;
    }
    for s in store.stats_mut() {
        let c = [s.stats.channels()];
        s.stats = RunningStats { mean: take(TensorKind::RunningMean, &s.name, &c)?, var: take(TensorKind::RunningVar, &s.name, &c)? };
    }
    Ok((model, manifest.optim))
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, optim: &Sgd, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, optim)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, Sgd)> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
