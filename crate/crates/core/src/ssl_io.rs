//! Binary container for SSL embedding sequences.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..12   magic "ASPD-SSL-EMB"
//! bytes 12..16  u32 format version (currently 1)
//! bytes 16..20  u32 T (frames)
//! bytes 20..24  u32 D (channels)
//! bytes 24..    T * D f32 values, row-major
//! ```
//!
//! Values are stored as f32 and widened to f64 on load. Truncated or
//! malformed files report the byte offset of the failure.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSL_MAGIC: &[u8; 12] = b"ASPD-SSL-EMB";
pub const SSL_VERSION: u32 = 1;

/// Writes a `[T, D]` sequence to `path`.
pub fn write_embeddings(path: &Path, ssl: &Tensor) -> Result<()> {
    if ssl.rank() != 2 {
        return Err(Error::Shape(format!(
            "embeddings must be [T, D], got {:?}",
            ssl.shape()
        )));
    }
    let (t, d) = (ssl.dim(0), ssl.dim(1));
    let mut buf = Vec::with_capacity(24 + 4 * t * d);
    buf.extend_from_slice(SSL_MAGIC);
    buf.extend_from_slice(&SSL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in ssl.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a sequence written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let need = |offset: usize, n: usize| -> Result<()> {
        if offset + n > bytes.len() {
            Err(Error::parse(
                path,
                format!(
                    "truncated at byte {offset}: need {n} more bytes, file has {}",
                    bytes.len()
                ),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 24)?;
    if &bytes[0..12] != SSL_MAGIC {
        return Err(Error::parse(path, "bad magic at byte 0"));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if version != SSL_VERSION {
        return Err(Error::parse(
            path,
            format!("unsupported version {version} at byte 12"),
        ));
    }
    let t = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
    if t == 0 || d == 0 {
        return Err(Error::parse(path, format!("empty extents T={t} D={d}")));
    }
    need(24, 4 * t * d)?;
    if bytes.len() != 24 + 4 * t * d {
        return Err(Error::parse(
            path,
            format!("trailing bytes after offset {}", 24 + 4 * t * d),
        ));
    }
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t * d {
        let off = 24 + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::parse(
                path,
                format!("non-finite value at byte {off}"),
            ));
        }
        data.push(v as f64);
    }
    Tensor::from_vec(&[t, d], data)
}

/// Reads a sequence and checks its channel count against the model config.
pub fn read_embeddings_expecting(path: &Path, expected_d: usize) -> Result<Tensor> {
    let ssl = read_embeddings(path)?;
    if ssl.dim(1) != expected_d {
        return Err(Error::Config(format!(
            "{}: embedding dimension {} does not match configured D={expected_d}",
            path.display(),
            ssl.dim(1)
        )));
    }
    Ok(ssl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = SeededRng::new(1);
        // Use values that are exactly representable as f32 so the
        // f64 -> f32 -> f64 round trip is lossless.
        let data: Vec<f64> = (0..12).map(|_| (rng.normal() as f32) as f64).collect();
        let ssl = Tensor::from_vec(&[3, 4], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.sslemb");
        write_embeddings(&path, &ssl).unwrap();
        let loaded = read_embeddings(&path).unwrap();
        assert_eq!(loaded.shape(), ssl.shape());
        assert_eq!(loaded.data(), ssl.data());
        write_embeddings(&dir.path().join("again.sslemb"), &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.sslemb")).unwrap()
        );
    }

    #[test]
    fn truncated_file_reports_offset() {
        let ssl = Tensor::filled(&[4, 4], 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.sslemb");
        write_embeddings(&path, &ssl).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..30]).unwrap();
        let err = read_embeddings(&path).unwrap_err().to_string();
        assert!(err.contains("truncated at byte"), "{err}");
        std::fs::write(&path, b"").unwrap();
        assert!(read_embeddings(&path).is_err());
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let ssl = Tensor::filled(&[2, 5], 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.sslemb");
        write_embeddings(&path, &ssl).unwrap();
        assert!(read_embeddings_expecting(&path, 5).is_ok());
        assert!(matches!(
            read_embeddings_expecting(&path, 8),
            Err(Error::Config(_))
        ));
    }
}
