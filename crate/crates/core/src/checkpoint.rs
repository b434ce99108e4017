//! Parameter checkpoints: one line of JSON header, then little-endian `f32`
//! blobs in header order (values, then Adam first moments, then second
//! moments).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// `"flow"` or `"scorer"`.
    pub kind: String,
    pub dtype: String,
    /// Optimizer steps taken.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Model-specific section (architecture, standardization, ...).
    pub meta: serde_json::Value,
}

pub fn save(path: &Path, kind: &str, meta: serde_json::Value, store: &ParamStore) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        dtype: "f32le".into(),
        step: store.step(),
        tensors: store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    for section in 0..3 {
        for p in store.iter() {
            let data: &[f32] = match section {
                0 => p.value.data(),
                1 => &p.m,
                _ => &p.v,
            };
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads just the header.
pub fn read_header(path: &Path) -> Result<Header> {
    let mut r = BufReader::new(File::open(path)?);
    parse_header(&mut r)
}

fn parse_header(r: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let h: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if h.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: h.format_version,
        });
    }
    if h.dtype != "f32le" {
        return Err(Error::Checkpoint(format!("unsupported dtype `{}`", h.dtype)));
    }
    Ok(h)
}

/// Loads a checkpoint into `store`, whose parameter names and shapes must
/// match the header exactly (same architecture).
pub fn load_into(path: &Path, expected_kind: &str, store: &mut ParamStore) -> Result<Header> {
    let mut r = BufReader::new(File::open(path)?);
    let h = parse_header(&mut r)?;
    if h.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "expected a {expected_kind} checkpoint, found {}",
            h.kind
        )));
    }
    if h.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            h.tensors.len(),
            store.len()
        )));
    }
    for (e, p) in h.tensors.iter().zip(store.iter()) {
        if e.name != p.name || e.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: checkpoint {} {:?} vs model {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let total: usize = h.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != 3 * total * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            3 * total * 4,
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut off = 0;
    for section in 0..3 {
        for (id, e) in h.tensors.iter().enumerate() {
            let n: usize = e.shape.iter().product();
            let chunk = &floats[off..off + n];
            off += n;
            let p = store.by_id_mut(id);
            match section {
                0 => p.value = Tensor::new(&e.shape, chunk.to_vec())?,
                1 => p.m.copy_from_slice(chunk),
                _ => p.v.copy_from_slice(chunk),
            }
        }
    }
    store.set_step(h.step);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_keeps_values_and_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::new();
        a.init_uniform("w", &[3, 2], 3, &mut rng).unwrap();
        a.init_uniform("b", &[2], 3, &mut rng).unwrap();
        a.by_id_mut(0).grad.iter_mut().for_each(|g| *g = 0.5);
        a.adam_step(Default::default()).unwrap();
        save(&path, "flow", serde_json::json!({"d": 3}), &a).unwrap();

        let mut b = ParamStore::new();
        b.init_zeros("w", &[3, 2]).unwrap();
        b.init_zeros("b", &[2]).unwrap();
        let h = load_into(&path, "flow", &mut b).unwrap();
        assert_eq!(h.meta["d"], 3);
        assert_eq!(b.step(), 1);
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
            assert_eq!(p.m, q.m);
            assert_eq!(p.v, q.v);
        }
    }

    #[test]
    fn mismatches_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut a = ParamStore::new();
        a.init_zeros("w", &[3, 2]).unwrap();
        save(&path, "flow", serde_json::Value::Null, &a).unwrap();
        let mut b = ParamStore::new();
        b.init_zeros("w", &[2, 3]).unwrap();
        assert!(matches!(load_into(&path, "flow", &mut b), Err(Error::Checkpoint(_))));
        let mut c = ParamStore::new();
        c.init_zeros("w", &[3, 2]).unwrap();
        assert!(matches!(load_into(&path, "scorer", &mut c), Err(Error::Checkpoint(_))));
        std::fs::write(&path, "{\"format_version\":9}\n").unwrap();
        assert!(load_into(&path, "flow", &mut c).is_err());
    }
}
