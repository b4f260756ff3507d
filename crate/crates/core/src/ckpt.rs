//! Checkpoint archives: one file per module holding a JSON header (kind,
//! config, config hash, free-form metadata) and named f64 arrays for the
//! parameters, plus a second array section for optimizer state.
//!
//! The config hash is computed over the canonical (key-sorted) JSON form of
//! the config, so compatibility checks survive field reordering.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex;
use crate::tensor::Arr;

const MAGIC: &[u8; 8] = b"SDFCKPT1";

/// Hash of the canonical JSON encoding of a config value.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let canon = serde_json::to_string(&value)?;
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    Ok(hex(&h.finalize()))
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    config_hash: String,
    meta: serde_json::Value,
}

/// A fully parsed archive.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub params: Vec<(String, Arr)>,
    pub extras: Vec<(String, Arr)>,
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Deserialize the stored config into its concrete type.
    pub fn typed_config<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Error unless the stored config hashes to `hash`.
    pub fn expect_config_hash(&self, hash: &str, what: &str) -> Result<()> {
        if self.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "{what}: config hash {} does not match expected {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_arrays(w: &mut impl Write, arrays: &[(String, Arr)]) -> std::io::Result<()> {
    write_u64(w, arrays.len() as u64)?;
    for (name, arr) in arrays {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(w, arr.ndim() as u64)?;
        for d in arr.shape() {
            write_u64(w, *d as u64)?;
        }
        for x in arr.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Serialize>(
    path: &Path,
    kind: &str,
    config: &T,
    meta: serde_json::Value,
    params: &[(String, Arr)],
    extras: &[(String, Arr)],
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        config_hash: config_hash(config)?,
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u64(&mut w, header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    write_arrays(&mut w, params)?;
    write_arrays(&mut w, extras)?;
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated archive reading {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_arrays(r: &mut impl Read, section: &str) -> Result<Vec<(String, Arr)>> {
    let count = read_u64(r, section)?;
    if count > 1_000_000 {
        return Err(Error::Checkpoint(format!(
            "{section}: implausible array count {count}"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(r, section)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!(
                "{section}: implausible name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint(format!("truncated archive in {section}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("{section}: non-utf8 array name")))?;
        let ndim = read_u64(r, section)? as usize;
        if ndim > 16 {
            return Err(Error::Checkpoint(format!(
                "{section}: implausible rank {ndim} for {name}"
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(r, section)? as usize);
        }
        let n: usize = dims.iter().product();
        if n > 200_000_000 {
            return Err(Error::Checkpoint(format!(
                "{section}: implausible element count {n} for {name}"
            )));
        }
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Arr::from_shape_vec(IxDyn(&dims), vals)
            .map_err(|e| Error::Checkpoint(format!("bad shape for {name}: {e}")))?;
        out.push((name, arr));
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint archive (magic {magic:?})"
        )));
    }
    let header_len = read_u64(&mut r, "header")? as usize;
    if header_len > 16 * 1024 * 1024 {
        return Err(Error::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;
    let params = read_arrays(&mut r, "params")?;
    let extras = read_arrays(&mut r, "extras")?;
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        config_hash: header.config_hash,
        meta: header.meta,
        params,
        extras,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[derive(serde::Serialize)]
    struct DemoCfg {
        width: usize,
        lr: f64,
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = DemoCfg { width: 8, lr: 1e-3 };
        let params = vec![
            ("a.w".to_string(), Arr::from_elem(IxDyn(&[2, 3]), 0.5)),
            ("a.b".to_string(), Arr::from_elem(IxDyn(&[3]), -1.25)),
        ];
        let extras = vec![("opt.step".to_string(), Arr::from_elem(IxDyn(&[]), 7.0))];
        save_checkpoint(&path, "demo", &cfg, json!({"step": 7}), &params, &extras).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        ck.expect_kind("demo").unwrap();
        assert!(ck.expect_kind("other").is_err());
        assert_eq!(ck.meta["step"], 7);
        assert_eq!(ck.params.len(), 2);
        assert_eq!(ck.params[0].0, "a.w");
        assert_eq!(ck.params[0].1, params[0].1);
        assert_eq!(ck.extras[0].1[[]], 7.0);
        assert_eq!(ck.config_hash, config_hash(&cfg).unwrap());
        ck.expect_config_hash(&ck.config_hash.clone(), "demo").unwrap();
        assert!(ck.expect_config_hash("deadbeef", "demo").is_err());
    }

    #[test]
    fn hash_tracks_config_content() {
        let a = config_hash(&DemoCfg { width: 8, lr: 1e-3 }).unwrap();
        let b = config_hash(&DemoCfg { width: 8, lr: 1e-3 }).unwrap();
        let c = config_hash(&DemoCfg { width: 9, lr: 1e-3 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Key order must not matter: hash the same content as a plain value.
        let v1 = json!({"width": 8, "lr": 1e-3});
        let v2 = json!({"lr": 1e-3, "width": 8});
        assert_eq!(config_hash(&v1).unwrap(), config_hash(&v2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"PNG????").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"SDFCKPT1\xff\xff\xff\xff\xff\xff\xff\xff").unwrap();
        assert!(load_checkpoint(&path).is_err());
        let mut good = Vec::new();
        good.extend_from_slice(MAGIC);
        good.extend_from_slice(&2u64.to_le_bytes());
        good.extend_from_slice(b"{}");
        std::fs::write(&path, &good).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("checkpoint") || err.contains("missing field"), "{err}");
    }
}
