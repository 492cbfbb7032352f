//! Single-file archive of named f64 arrays plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DRFTNET\0"          8 bytes magic
//! version               u32
//! header_len            u64
//! header                header_len bytes of UTF-8 JSON
//! data                  f64 values of every tensor, in header order
//! ```
//!
//! The header is `{"meta": <any JSON>, "tensors": [{"name", "shape",
//! "trainable", "offset", "len"}]}`, where `offset` and `len` count f64
//! values from the start of the data block. Any language that can parse
//! JSON and read little-endian doubles can load an archive.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"DRFTNET\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

pub fn encode(meta: &serde_json::Value, store: &ParamStore) -> Vec<u8> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(name, e)| {
            let r = TensorRecord {
                name: name.clone(),
                shape: e.shape.clone(),
                trainable: e.trainable,
                offset,
                len: e.data.len(),
            };
            offset += e.data.len();
            r
        })
        .collect();
    let header = serde_json::to_vec(&Header { meta: meta.clone(), tensors }).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, e) in store.iter() {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let bad = |m: &str| Error::Version(format!("not a readable archive: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version(format!("archive version {version}, this build reads {VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).unwrap_or_default();
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
    let data = &body[hlen..];
    let mut store = ParamStore::new();
    for t in header.tensors {
        if t.len != t.shape.iter().product::<usize>() {
            return Err(bad(&format!("tensor `{}` length does not match its shape", t.name)));
        }
        let raw = data.get(t.offset * 8..(t.offset + t.len) * 8).ok_or_else(|| bad("truncated data"))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(t.name, &t.shape, values, t.trainable);
    }
    Ok(Archive { meta: header.meta, tensors: store })
}

/// Writes atomically: the archive goes to a sibling temp file first.
pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = encode(meta, store);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        s.insert_normal("a.weight", &[2, 3, 4, 4], 1.0, &mut rng);
        s.insert("a.sn_u", &[2], vec![0.6, 0.8], false);
        s.insert("scalar", &[], vec![f64::MIN_POSITIVE], true);
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = sample_store();
        let meta = serde_json::json!({"step": 7, "note": "x"});
        let a = decode(&encode(&meta, &s)).unwrap();
        assert_eq!(a.tensors, s);
        assert_eq!(a.meta, meta);
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let mut bytes = encode(&serde_json::Value::Null, &sample_store());
        let n = bytes.len();
        assert!(matches!(decode(&bytes[..n - 3]), Err(Error::Version(_))));
        bytes[8] = 9;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
        assert!(matches!(decode(b"PNG....................."), Err(Error::Version(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        save(&p, &serde_json::json!({}), &sample_store()).unwrap();
        assert_eq!(load(&p).unwrap().tensors, sample_store());
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
