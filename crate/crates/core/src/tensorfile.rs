//! Flat binary tensor files with a JSON manifest.
//!
//! Binary layout: a 16-byte header (`b"STLB"`, format version, tensor count
//! and total scalar count, each `u32` little-endian) followed by every tensor's
//! values as little-endian `f32`, in manifest order. The manifest lists each
//! tensor's name, shape and offset (in scalars) into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"STLB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata stored alongside (configuration, step counts).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> (Vec<u8>, TensorManifest) {
    let mut entries = Vec::new();
    let mut body = Vec::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        for &v in t.data() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.len();
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + body.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(offset as u32).to_le_bytes());
    bytes.extend_from_slice(&body);
    (
        bytes,
        TensorManifest {
            version: VERSION,
            tensors: entries,
            meta: serde_json::Value::Null,
        },
    )
}

pub fn decode(bytes: &[u8], manifest: &TensorManifest) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(format!("unsupported version {}", word(4)));
    }
    let (count, total) = (word(8) as usize, word(12) as usize);
    if count != manifest.tensors.len() {
        return Err(format!(
            "header lists {count} tensors, manifest {}",
            manifest.tensors.len()
        ));
    }
    if bytes.len() != HEADER_LEN + 4 * total {
        return Err(format!(
            "expected {} data bytes, found {}",
            4 * total,
            bytes.len() - HEADER_LEN
        ));
    }
    let mut out = Vec::with_capacity(count);
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset + n > total {
            return Err(format!("tensor {} overruns the data section", e.name));
        }
        let data = (0..n)
            .map(|i| {
                let at = HEADER_LEN + 4 * (e.offset + i);
                f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64
            })
            .collect();
        out.push((
            e.name.clone(),
            Tensor::new(&e.shape, data).map_err(|err| err.to_string())?,
        ));
    }
    Ok(out)
}

pub fn write(bin: &Path, manifest_path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let (bytes, mut manifest) = encode(store.iter());
    manifest.meta = meta;
    fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

pub fn read(bin: &Path, manifest_path: &Path) -> Result<(Vec<(String, Tensor)>, TensorManifest)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: TensorManifest = serde_json::from_str(&text)?;
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let tensors = decode(&bytes, &manifest).map_err(|m| Error::format(bin, m))?;
    Ok((tensors, manifest))
}

/// Rounds every tensor to `f32` precision, matching what a save/load cycle yields.
pub fn round_to_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (bytes, m) = encode([("a", &t)]);
        assert_eq!(&bytes[..4], b"STLB");
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), -2.0);
        assert_eq!(m.tensors[0].offset, 0);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::scalar(1.0);
        let (mut bytes, m) = encode([("a", &t)]);
        assert!(decode(&bytes[..18], &m).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes, &m).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_for_f32_values(
            a in proptest::collection::vec(-1e6f32..1e6, 1..20),
            b in proptest::collection::vec(-1.0f32..1.0, 1..20),
        ) {
            let ta = Tensor::new(&[a.len()], a.iter().map(|&v| v as f64).collect()).unwrap();
            let tb = Tensor::new(&[1, b.len()], b.iter().map(|&v| v as f64).collect()).unwrap();
            let (bytes, m) = encode([("a", &ta), ("b", &tb)]);
            let back = decode(&bytes, &m).unwrap();
            prop_assert_eq!(&back[0].1, &ta);
            prop_assert_eq!(&back[1].1, &tb);
            prop_assert_eq!(back[1].0.as_str(), "b");
        }
    }
}
