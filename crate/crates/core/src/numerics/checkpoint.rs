//! Flat parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "HMCK"
//! 4       2     format version (= 1)
//! 6       2     reserved, zero
//! 8       8     manifest length M in bytes
//! 16      M     manifest: UTF-8 JSON array of
//!               {"name", "dtype", "shape", "offset", "trainable"}
//! 16+M    ...   payload: each tensor's values as IEEE-754 LE, row-major,
//!               at `offset` bytes from the start of the payload
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Real, Tensor};

const MAGIC: &[u8; 4] = b"HMCK";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

pub fn encode<T: Real>(store: &ParameterStore<T>) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(store.len());
    let mut payload = Vec::with_capacity(store.num_scalars() * T::BYTES);
    for p in store.entries() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            dtype: T::DTYPE.to_string(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
            trainable: p.trainable,
        });
        for &v in p.value.data() {
            v.to_le_bytes_vec(&mut payload);
        }
    }
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads the manifest without decoding payloads.
pub fn manifest(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("missing HMCK header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = HEADER_LEN
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    Ok((entries, end))
}

/// Decodes a checkpoint into a fresh store. Payloads stored as `f32` or `f64`
/// are converted to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParameterStore<T>> {
    let (entries, payload_start) = manifest(bytes)?;
    let payload = &bytes[payload_start..];
    let mut store = ParameterStore::new();
    for e in entries {
        let width = match e.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(Error::Checkpoint(format!("dtype {other} for {}", e.name))),
        };
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let stop = start + n * width;
        if stop > payload.len() {
            return Err(Error::Checkpoint(format!("payload of {} out of range", e.name)));
        }
        let data = payload[start..stop]
            .chunks_exact(width)
            .map(|c| match width {
                8 => T::of(f64::from_le_slice(c)),
                _ => T::of(f32::from_le_slice(c) as f64),
            })
            .collect();
        store.insert_with(e.name, Tensor::from_vec(&e.shape, data)?, e.trainable)?;
    }
    Ok(store)
}

/// Copies values from `src` into `dst` by name; every name in `dst` must be
/// present in `src` with the same shape.
pub fn load_into<T: Real>(dst: &mut ParameterStore<T>, src: &ParameterStore<T>) -> Result<()> {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let v = src.get(&name)?;
        if v.shape() != dst.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} vs {:?}",
                v.shape(),
                dst.value(id).shape()
            )));
        }
        *dst.value_mut(id) = v.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("a.weight", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap())
            .unwrap();
        s.insert_with("b", Tensor::from_vec(&[3], vec![0.0, -0.0, 7.0]).unwrap(), false)
            .unwrap();
        let bytes = encode(&s).unwrap();
        let back: ParameterStore<f64> = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.get("a.weight").unwrap().bit_eq(s.get("a.weight").unwrap()));
        assert!(back.get("b").unwrap().bit_eq(s.get("b").unwrap()));
        assert!(!back.entry(back.id("b").unwrap()).trainable);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode::<f64>(b"NOPE").is_err());
        let mut s = ParameterStore::<f32>::new();
        s.insert("x", Tensor::full(&[4], 1.5)).unwrap();
        let bytes = encode(&s).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
