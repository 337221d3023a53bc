//! Binary checkpoint: `TMAB` magic, version, length-prefixed JSON config,
//! parameter manifest and a little-endian `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, Network};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TMAB";
pub const VERSION: u32 = 1;

/// Serialize every parameter and buffer of `model` (converted to `f32`).
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let entries = model.params().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * e.value.numel() as u64;
    }
    for e in entries {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Rebuild a model from checkpoint bytes, validating the manifest against the
/// architecture implied by the embedded config.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let mut store = ParamStore::<T>::new();
    let net = Network::build(&config, &mut store)?;

    let count = r.u32("entry count")? as usize;
    if count != store.len() {
        return Err(Error::Validation(format!(
            "manifest has {count} entries, config implies {}",
            store.len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for (i, expected) in store.entries().iter().enumerate() {
        let what = format!("manifest entry {i}");
        let name_len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32(&name)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let offset = r.u64(&name)? as usize;
        if name != expected.name {
            return Err(Error::Validation(format!(
                "entry {i} is {name:?}, expected {:?}",
                expected.name
            )));
        }
        if shape != expected.value.shape() {
            return Err(Error::Validation(format!(
                "{name}: manifest shape {shape:?} disagrees with config shape {:?}",
                expected.value.shape()
            )));
        }
        manifest.push((name, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut values = Vec::with_capacity(count);
    for (name, shape, offset) in &manifest {
        let n: usize = shape.iter().product();
        let end = offset
            .checked_add(4 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "{name}: payload truncated (needs bytes {offset}..{}, have {})",
                    offset + 4 * n,
                    payload.len()
                ))
            })?;
        let data: Vec<T> = payload[*offset..end]
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])).unwrap())
            .collect();
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::Validation(format!("{name}: non-finite values")));
        }
        values.push(t);
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *store.get_mut(id) = v;
    }
    Ok(Model::from_parts(net, store))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_bytes(&fs::read(path)?)
}
