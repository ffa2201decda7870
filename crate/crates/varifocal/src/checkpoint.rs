//! Versioned binary checkpoint container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   4 bytes  "VFCK"
//! version u32      currently 1
//! count   u64      number of tensors
//! tensor  repeated, sorted by name:
//!   name_len u32, name UTF-8 bytes,
//!   dtype u8 (1 = f32, 2 = f64), rank u8, extents u64 * rank,
//!   values raw little-endian
//! ```
//!
//! Parameters are stored under their registry names; Adam state rides along
//! as `<name>#adam_m` / `#adam_v` / `#adam_t`, and run metadata as scalar
//! `#meta.<key>` tensors. Sorting makes the byte stream a pure function of
//! the content, so save -> load -> save round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;

fn push_value<E: Element>(out: &mut Vec<u8>, v: E) {
    match E::DTYPE {
        Dtype::F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
        Dtype::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
    }
}

/// Serializes named tensors; entries are sorted by name internally.
pub fn write_tensors<E: Element>(
    path: &Path,
    entries: &BTreeMap<String, Tensor<E>>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(E::DTYPE.code());
        out.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            push_value(&mut out, v);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Reads every tensor in the container. The element type must match the
/// stored dtype.
pub fn read_tensors<E: Element>(path: &Path) -> Result<BTreeMap<String, Tensor<E>>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u64()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = Dtype::from_code(c.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype in {name}")))?;
        if dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} stored as {dtype:?}, expected {:?}",
                E::DTYPE
            )));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = c.take(n * width)?;
        let data: Vec<E> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| E::from_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|b| E::from_f64(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        };
        out.insert(name, Tensor::from_vec(shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Saves a parameter store (values, Adam state when present) plus scalar
/// metadata entries.
pub fn save_store<E: Element>(
    path: &Path,
    store: &ParamStore<E>,
    meta: &BTreeMap<String, f64>,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    for id in store.ids() {
        let e = store.entry(id);
        entries.insert(e.name.clone(), e.value.clone());
        if let Some(adam) = &e.adam {
            entries.insert(format!("{}#adam_m", e.name), adam.m.clone());
            entries.insert(format!("{}#adam_v", e.name), adam.v.clone());
            entries.insert(
                format!("{}#adam_t", e.name),
                Tensor::scalar(E::from_f64(adam.step as f64)),
            );
        }
    }
    for (k, v) in meta {
        entries.insert(format!("#meta.{k}"), Tensor::scalar(E::from_f64(*v)));
    }
    write_tensors(path, &entries)
}

/// Restores values (and Adam state) into an architecturally identical store.
/// Every parameter must be present with a matching shape; unknown non-meta
/// entries are rejected. Returns the metadata scalars.
pub fn load_store<E: Element>(
    path: &Path,
    store: &mut ParamStore<E>,
) -> Result<BTreeMap<String, f64>> {
    let mut tensors = read_tensors::<E>(path)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let value = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if value.shape() != store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value;
        let m = tensors.remove(&format!("{name}#adam_m"));
        let v = tensors.remove(&format!("{name}#adam_v"));
        let t = tensors.remove(&format!("{name}#adam_t"));
        if let (Some(m), Some(v), Some(t)) = (m, v, t) {
            let state = AdamState {
                m,
                v,
                step: t.item()?.to_f64() as u64,
            };
            store.set_adam(id, Some(state));
        }
    }
    let mut meta = BTreeMap::new();
    for (name, tensor) in tensors {
        if let Some(key) = name.strip_prefix("#meta.") {
            meta.insert(key.to_string(), tensor.item()?.to_f64());
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vfck");
        let mut entries = BTreeMap::new();
        entries.insert(
            "a.weight".to_string(),
            Tensor::<f32>::from_vec(vec![2, 3], vec![0.1, -0.2, 3.5e-8, 1e20, -0.0, 7.0]).unwrap(),
        );
        entries.insert("z".to_string(), Tensor::<f32>::scalar(42.0));
        write_tensors(&path, &entries).unwrap();
        let back = read_tensors::<f32>(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (k, v) in &entries {
            assert!(back[k].bit_eq(v), "{k}");
        }
        // writing the read-back content reproduces identical bytes
        let path2 = dir.path().join("t2.vfck");
        write_tensors(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vfck");
        let mut entries = BTreeMap::new();
        entries.insert("x".to_string(), Tensor::<f64>::scalar(1.0));
        write_tensors(&path, &entries).unwrap();
        assert!(read_tensors::<f32>(&path).is_err());
    }

    #[test]
    fn store_round_trip_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vfck");
        let mut store = ParamStore::<f32>::new();
        let w = store.register("w", Tensor::filled(&[3], 1.25));
        store.set_adam(
            w,
            Some(AdamState {
                m: Tensor::filled(&[3], 0.5),
                v: Tensor::filled(&[3], 0.25),
                step: 7,
            }),
        );
        let mut meta = BTreeMap::new();
        meta.insert("completed_step".to_string(), 2.0);
        save_store(&path, &store, &meta).unwrap();

        let mut fresh = ParamStore::<f32>::new();
        let w2 = fresh.register("w", Tensor::zeros(&[3]));
        let meta_back = load_store(&path, &mut fresh).unwrap();
        assert!(fresh.value(w2).bit_eq(store.value(w)));
        assert_eq!(meta_back["completed_step"], 2.0);
        assert_eq!(fresh.entry(w2).adam.as_ref().unwrap().step, 7);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vfck");
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::filled(&[3], 1.0));
        save_store(&path, &store, &BTreeMap::new()).unwrap();

        let mut other = ParamStore::<f32>::new();
        other.register("w", Tensor::zeros(&[4]));
        assert!(load_store(&path, &mut other).is_err());
    }
}
