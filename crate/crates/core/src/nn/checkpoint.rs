//! Binary checkpoint: `"MOII"`, u32 format version, then named tensors until end of file.
//!
//! Each tensor: name length (u32), UTF-8 name, dtype tag (u8, 0 = f32, 1 = f64), rank (u32),
//! dims (u32 each), little-endian values. All integers are little-endian. The model
//! configuration lives next to the checkpoint in a `key=value` sidecar (`<file>.cfg`).

use std::path::{Path, PathBuf};

use super::config::ModelConfig;
use super::model::Model;
use crate::autodiff::{DType, Float, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::kv::{render, KvMap};

pub const MAGIC: &[u8; 4] = b"MOII";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_params<T: Float>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format { what: "checkpoint", detail: format!("truncated while reading {what}") });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn read_values<U: Float, T: Float>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(U::BYTES).map(|c| T::of(U::read_le(c).as_f64())).collect()
}

/// Decodes a checkpoint, converting values to `T` when the stored dtype differs.
pub fn decode_params<T: Float>(bytes: &[u8]) -> Result<(ParamStore<T>, Option<DType>)> {
    let bad = |detail: String| Error::Format { what: "checkpoint", detail };
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad("missing MOII magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut store = ParamStore::new();
    let mut dtype = None;
    while r.at < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| bad("tensor name is not UTF-8".into()))?.to_string();
        let tag = r.take(1, "dtype")?[0];
        let dt = DType::from_tag(tag).ok_or_else(|| bad(format!("unknown dtype tag {tag} for `{name}`")))?;
        dtype.get_or_insert(dt);
        let rank = r.u32("rank")? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = match dt {
            DType::F32 => read_values::<f32, T>(r.take(n * 4, "values")?),
            DType::F64 => read_values::<f64, T>(r.take(n * 8, "values")?),
        };
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((store, dtype))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save_params<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_params(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params<T: Float>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_params(&bytes)?.0)
}

/// Stored dtype of a checkpoint (`None` when it holds no tensors).
pub fn checkpoint_dtype(path: &Path) -> Result<Option<DType>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_params::<f64>(&bytes)?.1)
}

/// Writes the checkpoint and its configuration sidecar.
pub fn save_model<T: Float>(model: &Model<T>, path: &Path) -> Result<()> {
    save_params(model.params(), path)?;
    let cfg = sidecar_path(path);
    std::fs::write(&cfg, render(&model.config().to_pairs())).map_err(|e| Error::io(cfg, e))
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let cfg_path = sidecar_path(path);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mut kv = KvMap::parse(&text)?;
    let cfg = ModelConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

pub fn load_model<T: Float>(path: &Path) -> Result<Model<T>> {
    let cfg = load_config(path)?;
    Model::from_params(cfg, load_params(path)?)
}
