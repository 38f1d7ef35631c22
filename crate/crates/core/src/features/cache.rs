//! Binary feature cache.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"CTLFEAT\0"
//! version u32
//! d1 w h d2 u32 x4
//! count   u64
//! count x record:
//!     id_len u32, id bytes (UTF-8)
//!     d1 f32 global values
//!     w*h*d2 f32 map values
//!     crc32  u32 over the record bytes above
//! ```

use std::fs;
use std::path::Path;

use super::{FeatureMap, FeatureSpec, FeatureStore, GlobalFeature, ImageFeatures};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTLFEAT\0";
pub const FEATURE_CACHE_VERSION: u32 = 1;

pub fn write_cache(path: &Path, spec: &FeatureSpec, store: &FeatureStore) -> Result<()> {
    spec.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FEATURE_CACHE_VERSION.to_le_bytes());
    for v in [spec.d1, spec.w, spec.h, spec.d2] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (id, f) in store {
        f.check(spec)?;
        let start = out.len();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in f.global.0.iter().chain(&f.map.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::ChecksumMismatch(format!("file truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Shape("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_cache(path: &Path) -> Result<(FeatureSpec, FeatureStore)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| bad_magic())? != MAGIC {
        return Err(bad_magic());
    }
    let version = r.u32()?;
    if version != FEATURE_CACHE_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: version,
            expected: FEATURE_CACHE_VERSION,
        });
    }
    let spec = FeatureSpec {
        d1: r.u32()? as usize,
        w: r.u32()? as usize,
        h: r.u32()? as usize,
        d2: r.u32()? as usize,
    };
    spec.validate()?;
    let count = r.u64()?;
    let mut store = FeatureStore::new();
    for _ in 0..count {
        let start = r.pos;
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::ChecksumMismatch("record id is not UTF-8".into()))?
            .to_string();
        let global = r.f32s(spec.d1)?;
        let values = r.f32s(spec.regions() * spec.d2)?;
        let expected = crc32fast::hash(&buf[start..r.pos]);
        if r.u32()? != expected {
            return Err(Error::ChecksumMismatch(format!("record {id:?}")));
        }
        let f = ImageFeatures {
            global: GlobalFeature(global),
            map: FeatureMap { w: spec.w, h: spec.h, d2: spec.d2, values },
        };
        store.insert(id, f);
    }
    if r.pos != buf.len() {
        return Err(Error::ChecksumMismatch("trailing bytes after last record".into()));
    }
    Ok((spec, store))
}

fn bad_magic() -> Error {
    Error::FormatVersionMismatch { found: 0, expected: FEATURE_CACHE_VERSION }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> FeatureSpec {
        FeatureSpec { d1: 3, w: 2, h: 2, d2: 2 }
    }

    fn entry(seed: f32) -> ImageFeatures {
        ImageFeatures {
            global: GlobalFeature(vec![seed, -0.0, f32::MIN_POSITIVE]),
            map: FeatureMap {
                w: 2,
                h: 2,
                d2: 2,
                values: (0..8).map(|i| seed / (i as f32 + 3.0)).collect(),
            },
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let mut store = FeatureStore::new();
        store.insert("a".into(), entry(0.1));
        store.insert("b".into(), entry(1e-30));
        write_cache(&path, &spec(), &store).unwrap();
        let (s, back) = read_cache(&path).unwrap();
        assert_eq!(s, spec());
        for (k, v) in &store {
            let w = &back[k];
            let bits = |f: &ImageFeatures| -> Vec<u32> {
                f.global.0.iter().chain(&f.map.values).map(|x| x.to_bits()).collect()
            };
            assert_eq!(bits(v), bits(w));
        }
    }

    #[test]
    fn empty_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_cache(&path, &spec(), &FeatureStore::new()).unwrap();
        assert!(read_cache(&path).unwrap().1.is_empty());
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let mut store = FeatureStore::new();
        store.insert("a".into(), entry(0.5));
        write_cache(&path, &spec(), &store).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert_eq!(read_cache(&path).unwrap_err().name(), "ChecksumMismatch");

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x40;
        fs::write(&path, &flipped).unwrap();
        assert_eq!(read_cache(&path).unwrap_err().name(), "ChecksumMismatch");
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_cache(&path, &spec(), &FeatureStore::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert_eq!(read_cache(&path).unwrap_err().name(), "FormatVersionMismatch");
    }
}
