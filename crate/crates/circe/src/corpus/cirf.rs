//! The CIRF binary feature file: magic `CIRF`, version, record count, then
//! per record an id, token matrix shape, little-endian `f32` payload, and a
//! string metadata map. All integers are little-endian; round-trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{id_map, CorpusError, FeatureMatrix, ImageRecord};

const MAGIC: [u8; 4] = *b"CIRF";
const VERSION: u32 = 1;
/// Sanity cap on any single length field to reject corrupt headers before
/// attempting a huge allocation.
const MAX_LEN: u64 = 1 << 31;

/// Validates and writes records to `path` in the CIRF format.
pub fn save_features(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    id_map(records)?; // id uniqueness; matrices were validated at construction
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        write_str(&mut w, &r.id)?;
        w.write_all(&(r.tokens.rows() as u32).to_le_bytes())?;
        w.write_all(&(r.tokens.dim() as u32).to_le_bytes())?;
        for &v in r.tokens.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(r.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &r.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads records from a CIRF file, reconstructing them bit-exactly.
pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>, CorpusError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(CorpusError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CorpusError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let count = read_u64(&mut r)?;
    if count > MAX_LEN {
        return Err(CorpusError::invalid(format!("implausible record count {count}")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = read_str(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if (rows as u64) * (dim as u64) > MAX_LEN {
            return Err(CorpusError::invalid(format!(
                "implausible token shape {rows}x{dim}"
            )));
        }
        let mut data = Vec::with_capacity(rows * dim);
        let mut buf = [0u8; 4];
        for _ in 0..rows * dim {
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tokens = FeatureMatrix::new(rows, dim, data)?;
        let meta_len = read_u32(&mut r)?;
        let mut meta = BTreeMap::new();
        for _ in 0..meta_len {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.insert(k, v);
        }
        records.push(ImageRecord::new(id, tokens, meta)?);
    }
    id_map(&records)?;
    Ok(records)
}

fn write_str(w: &mut impl Write, s: &str) -> Result<(), CorpusError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CorpusError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CorpusError::Truncated
        } else {
            CorpusError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CorpusError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CorpusError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String, CorpusError> {
    let len = read_u32(r)? as usize;
    if len as u64 > MAX_LEN {
        return Err(CorpusError::invalid(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| CorpusError::invalid("string is not valid UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<ImageRecord> {
        let mut meta = BTreeMap::new();
        meta.insert("color".to_string(), "red".to_string());
        vec![
            ImageRecord::new(
                "img00000",
                FeatureMatrix::new(2, 3, vec![1.0, 0.5, -0.25, 0.125, 2.0, -1.0]).unwrap(),
                meta,
            )
            .unwrap(),
            ImageRecord::new(
                "img00001",
                FeatureMatrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap(),
                BTreeMap::new(),
            )
            .unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cirf");
        let records = sample_records();
        save_features(&records, &path).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn empty_list_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cirf");
        save_features(&[], &path).unwrap();
        assert!(load_features(&path).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cirf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match load_features(&path) {
            Err(CorpusError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.cirf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CIRF");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_features(&path) {
            Err(CorpusError::VersionMismatch { found: 9, .. }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.cirf");
        save_features(&sample_records(), &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.cirf");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        match load_features(&cut) {
            Err(CorpusError::Truncated) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn save_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.cirf");
        let mut records = sample_records();
        records[1].id = records[0].id.clone();
        assert!(save_features(&records, &path).is_err());
    }
}
