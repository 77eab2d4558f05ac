//! The CIRP checkpoint file: magic `CIRP`, version, a JSON header carrying
//! the encoder config and a named tensor directory (shapes and byte
//! offsets), then raw little-endian `f32` tensor payloads.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderError, EncoderParams};

const MAGIC: [u8; 4] = *b"CIRP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: u32,
    cols: u32,
    /// byte offset into the payload section
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes parameters to `path`. Values are rounded to `f32`; a reload
/// followed by a re-save is byte-identical.
pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    if !params.all_finite() {
        return Err(EncoderError::invalid("refusing to save non-finite parameters"));
    }
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    params.for_each_tensor(&mut |name, m| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows() as u32,
            cols: m.cols() as u32,
            offset,
        });
        offset += (m.as_slice().len() * 4) as u64;
    });
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        tensors,
    })
    .map_err(|e| EncoderError::invalid(format!("header serialization failed: {e}")))?;

    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let mut io_err = None;
    params.for_each_tensor(&mut |_, m| {
        if io_err.is_some() {
            return;
        }
        for &v in m.as_slice() {
            if let Err(e) = w.write_all(&(v as f32).to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(EncoderError::Io(e));
    }
    w.flush()?;
    Ok(())
}

/// Reads parameters back from a CIRP file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams, EncoderError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(EncoderError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let mut buf4 = [0u8; 4];
    read_exact(&mut r, &mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(EncoderError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    read_exact(&mut r, &mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| EncoderError::invalid(format!("bad checkpoint header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut directory: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut params = EncoderParams::zeros(&header.config)?;
    let mut err: Option<EncoderError> = None;
    params.for_each_tensor_mut(&mut |name, m| {
        if err.is_some() {
            return;
        }
        let Some(entry) = directory.remove(name) else {
            err = Some(EncoderError::invalid(format!("checkpoint missing tensor {name:?}")));
            return;
        };
        if (entry.rows as usize, entry.cols as usize) != (m.rows(), m.cols()) {
            err = Some(EncoderError::invalid(format!(
                "tensor {name:?} has shape {}x{}, expected {}x{}",
                entry.rows,
                entry.cols,
                m.rows(),
                m.cols()
            )));
            return;
        }
        let start = entry.offset as usize;
        let nbytes = m.as_slice().len() * 4;
        let Some(bytes) = payload.get(start..start + nbytes) else {
            err = Some(EncoderError::Truncated);
            return;
        };
        for (v, chunk) in m.as_mut_slice().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(stray) = directory.keys().next() {
        return Err(EncoderError::invalid(format!(
            "checkpoint has unexpected tensor {stray:?}"
        )));
    }
    if !params.all_finite() {
        return Err(EncoderError::invalid("checkpoint contains non-finite values"));
    }
    Ok(params)
}

/// Clones parameters through an f32 round, matching what a save/load pair
/// produces. Used to compare in-memory training results with checkpoints.
pub fn round_to_f32(params: &EncoderParams) -> EncoderParams {
    let mut out = params.clone();
    out.for_each_tensor_mut(&mut |_, m| {
        for v in m.as_mut_slice() {
            *v = *v as f32 as f64;
        }
    });
    out
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), EncoderError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            EncoderError::Truncated
        } else {
            EncoderError::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_at_file_level() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.cirp");
        let p2 = dir.path().join("b.cirp");
        let mut cfg = EncoderConfig::default();
        cfg.k = 4;
        cfg.d = 16;
        cfg.blocks = 1;
        cfg.vocab = 32;
        cfg.image_dim = 8;
        cfg.max_text_len = 8;
        let params = init_params(&cfg, 3).unwrap();
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.config, cfg);
    }

    #[test]
    fn bad_magic_and_version_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cirp");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::BadMagic { .. })));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CIRP");
        bytes.extend_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(EncoderError::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.cirp");
        let mut cfg = EncoderConfig::default();
        cfg.d = 8;
        cfg.heads = 2;
        cfg.k = 2;
        cfg.blocks = 1;
        cfg.vocab = 8;
        cfg.image_dim = 8;
        cfg.max_text_len = 4;
        let params = init_params(&cfg, 0).unwrap();
        save_checkpoint(&params, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.cirp");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(EncoderError::Truncated)));
    }
}
