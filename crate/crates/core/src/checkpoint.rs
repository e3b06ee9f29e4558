//! `SWCK` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "SWCK"
//! version      u32      1
//! group_count  u32
//! groups       group_count x { name_len u32, name UTF-8 bytes, offset u64, length u64 }
//! value_count  u64
//! values       value_count x f64 (IEEE-754 binary64)
//! ```
//!
//! Each checkpoint may have a JSON sidecar (`<stem>.meta.json`) carrying the step, seed,
//! config digest and creation time. Values round-trip bit for bit, NaN payloads included.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Group, Layout, ParamVector};

pub const MAGIC: &[u8; 4] = b"SWCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_digest: String,
    /// RFC 3339 wall-clock time; the only field that differs between identical reruns.
    pub created_at: String,
}

impl CheckpointMeta {
    pub fn now(step: u64, seed: u64, config_digest: &str) -> Self {
        CheckpointMeta {
            step,
            seed,
            config_digest: config_digest.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        }
    }
}

pub fn encode(w: &ParamVector) -> Vec<u8> {
    let groups = w.groups();
    let name_bytes: usize = groups.iter().map(|g| g.name.len()).sum();
    let mut out = Vec::with_capacity(24 + groups.len() * 20 + name_bytes + w.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        out.extend_from_slice(&(g.offset as u64).to_le_bytes());
        out.extend_from_slice(&(g.len as u64).to_le_bytes());
    }
    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
    for v in w.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated while reading {what} at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> std::result::Result<usize, String> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| format!("{what} {v} does not fit in memory"))
    }
}

/// Parse an in-memory `SWCK` image. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamVector> {
    decode_inner(bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<ParamVector, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic, not an SWCK checkpoint".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let n_groups = r.u32("group count")? as usize;
    let mut groups = Vec::with_capacity(n_groups.min(1 << 16));
    for k in 0..n_groups {
        let name_len = r.u32("group name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "group name")?)
            .map_err(|_| format!("group {k} name is not UTF-8"))?
            .to_string();
        let offset = r.usize("group offset")?;
        let len = r.usize("group length")?;
        groups.push(Group { name, offset, len });
    }
    let layout = Layout::from_groups(groups).map_err(|e| e.to_string())?;
    let count = r.usize("value count")?;
    if count != layout.len() {
        return Err(format!("value count {count} but group table covers {}", layout.len()));
    }
    let byte_len = count.checked_mul(8).ok_or("value count overflows")?;
    let raw = r.take(byte_len, "values")?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParamVector::new(values, Arc::new(layout)).map_err(|e| e.to_string())
}

pub fn write(path: impl AsRef<Path>, w: &ParamVector) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(w)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<ParamVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Sidecar path: `dir/final.swck` -> `dir/final.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn write_with_meta(path: impl AsRef<Path>, w: &ParamVector, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    write(path, w)?;
    let mp = meta_path(path);
    let json = serde_json::to_vec_pretty(meta)?;
    fs::write(&mp, json).map_err(|e| Error::io(mp, e))
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let mp = meta_path(path.as_ref());
    let bytes = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        let layout = Layout::from_lengths([("layer0.weight", 3), ("layer0.bias", 1), ("é", 0), ("head", 2)]).unwrap();
        ParamVector::new(vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, -7.25, 1e300], Arc::new(layout)).unwrap()
    }

    #[test]
    fn header_bytes() {
        let bytes = encode(&ParamVector::from_values(vec![1.0]));
        assert_eq!(&bytes[..4], b"SWCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..17], b"w");
        assert_eq!(&bytes[17..25], &0u64.to_le_bytes());
        assert_eq!(&bytes[25..33], &1u64.to_le_bytes());
        assert_eq!(&bytes[33..41], &1u64.to_le_bytes());
        assert_eq!(&bytes[41..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn file_round_trip_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("final.swck");
        let w = sample();
        let meta = CheckpointMeta::now(2000, 7, "abc");
        write_with_meta(&p, &w, &meta).unwrap();
        assert_eq!(read(&p).unwrap(), w);
        assert_eq!(read_meta(&p).unwrap(), meta);
        assert!(dir.path().join("final.meta.json").exists());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode(&sample());
        let p = Path::new("x.swck");
        let check = |bytes: &[u8]| matches!(decode(bytes, p), Err(Error::Checkpoint { .. }));
        assert!(check(&good[..good.len() - 1]));
        assert!(check(&good[..3]));
        let mut extra = good.clone();
        extra.push(0);
        assert!(check(&extra));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(check(&magic));
        let mut version = good.clone();
        version[4] = 2;
        assert!(check(&version));
        // break the offset of the second group
        let mut overlap = good.clone();
        let second = 12 + 4 + "layer0.weight".len() + 16 + 4 + "layer0.bias".len();
        overlap[second] = 9;
        assert!(check(&overlap));
        assert!(matches!(read("/no/such/file.swck"), Err(Error::Io { .. })));
    }
}
