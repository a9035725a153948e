//! Binary feature cache: one file per track variant.
//!
//! Layout (little endian): magic `KSFC`, u32 version, u32 id length, id bytes,
//! u64 context length, u32 hash length, hash bytes, i32 shift, u32 windows,
//! u32 dim, then `windows × dim` f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KSFC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub track_id: String,
    pub context_len: usize,
    pub checkpoint_hash: String,
    pub shift: i32,
    pub embeddings: Vec<Vec<f32>>,
}

pub fn write_feature_cache(path: &Path, c: &FeatureCache) -> Result<()> {
    let dim = c.embeddings.first().map_or(0, Vec::len);
    if c.embeddings.iter().any(|e| e.len() != dim) {
        return Err(crate::error::invalid("feature rows have different widths"));
    }
    let mut buf = Vec::with_capacity(64 + c.embeddings.len() * dim * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(c.track_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(c.track_id.as_bytes());
    buf.extend_from_slice(&(c.context_len as u64).to_le_bytes());
    buf.extend_from_slice(&(c.checkpoint_hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(c.checkpoint_hash.as_bytes());
    buf.extend_from_slice(&c.shift.to_le_bytes());
    buf.extend_from_slice(&(c.embeddings.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in &c.embeddings {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so concurrent readers never see a partial file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed(self.path, "truncated feature cache"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::malformed(self.path, "non-UTF-8 string in feature cache"))
    }
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureCache> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::malformed(path, "not a feature cache file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::malformed(path, format!("cache version {version}")));
    }
    let track_id = r.string()?;
    let context_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let checkpoint_hash = r.string()?;
    let shift = i32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    let windows = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let data = r.take(windows * dim * 4)?;
    if r.at != bytes.len() {
        return Err(Error::malformed(
            path,
            "trailing bytes after feature matrix",
        ));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let embeddings = if dim == 0 {
        vec![Vec::new(); windows]
    } else {
        values.chunks(dim).map(<[f32]>::to_vec).collect()
    };
    Ok(FeatureCache {
        track_id,
        context_len,
        checkpoint_hash,
        shift,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.feat");
        let c = FeatureCache {
            track_id: "track-07".into(),
            context_len: 100_000,
            checkpoint_hash: "ab".repeat(32),
            shift: -3,
            embeddings: vec![vec![1.0, -2.5, 3.25], vec![0.0, 1e-7, f32::MAX]],
        };
        write_feature_cache(&path, &c).unwrap();
        assert_eq!(read_feature_cache(&path).unwrap(), c);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            read_feature_cache(&path),
            Err(Error::Malformed { .. })
        ));
    }
}
