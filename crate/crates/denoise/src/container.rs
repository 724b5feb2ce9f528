//! Binary container for weight files.
//!
//! A file is one or more sections back to back. Each section is:
//!
//! ```text
//! magic       [u8; 4]            section kind (e.g. b"DNET")
//! version     u32 little-endian  format revision
//! meta_len    u32 little-endian  byte length of the JSON block
//! metadata    UTF-8 JSON         self-describing header
//! payload_len u64 little-endian  number of f64 values
//! payload     f64 LE array       weights in a fixed documented order
//! crc32       u32 little-endian  CRC of the raw payload bytes
//! ```
//!
//! The checksum covers only the payload: metadata corruption surfaces as a
//! JSON parse error, weight corruption as a checksum mismatch.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub(crate) struct Section {
    pub magic: [u8; 4],
    pub metadata: String,
    pub payload: Vec<f64>,
}

impl Section {
    pub fn new(magic: [u8; 4], metadata: String, payload: Vec<f64>) -> Self {
        Section {
            magic,
            metadata,
            payload,
        }
    }
}

fn payload_bytes(payload: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub(crate) fn write_sections(path: &Path, sections: &[Section]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |buf: &[u8]| file.write_all(buf).map_err(|e| Error::io(path, e));
    for s in sections {
        write(&s.magic)?;
        write(&FORMAT_VERSION.to_le_bytes())?;
        let meta = s.metadata.as_bytes();
        write(&(meta.len() as u32).to_le_bytes())?;
        write(meta)?;
        write(&(s.payload.len() as u64).to_le_bytes())?;
        let bytes = payload_bytes(&s.payload);
        write(&bytes)?;
        write(&crc32fast::hash(&bytes).to_le_bytes())?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::ModelFormat(format!(
            "truncated file: needed {n} bytes for {what}, {} left",
            buf.len()
        )));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

/// Reads every section in the file. `expected_first` guards against feeding
/// the wrong kind of artifact to a loader.
pub(crate) fn read_sections(path: &Path, expected_first: [u8; 4]) -> Result<Vec<Section>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut buf = raw.as_slice();
    let mut sections = Vec::new();
    while !buf.is_empty() {
        let magic: [u8; 4] = take(&mut buf, 4, "magic")?.try_into().unwrap();
        if sections.is_empty() && magic != expected_first {
            return Err(Error::ModelFormat(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected_first)
            )));
        }
        let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let meta_len =
            u32::from_le_bytes(take(&mut buf, 4, "metadata length")?.try_into().unwrap()) as usize;
        let metadata = std::str::from_utf8(take(&mut buf, meta_len, "metadata")?)
            .map_err(|e| Error::ModelFormat(format!("metadata is not UTF-8: {e}")))?
            .to_owned();
        let count =
            u64::from_le_bytes(take(&mut buf, 8, "payload length")?.try_into().unwrap()) as usize;
        let bytes = take(&mut buf, count * 8, "payload")?;
        let stored = u32::from_le_bytes(take(&mut buf, 4, "checksum")?.try_into().unwrap());
        let actual = crc32fast::hash(bytes);
        if stored != actual {
            return Err(Error::ModelFormat(format!(
                "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
            )));
        }
        let payload = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        sections.push(Section {
            magic,
            metadata,
            payload,
        });
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> Vec<Section> {
        vec![
            Section::new(
                *b"DNET",
                r#"{"kind":"weights"}"#.into(),
                vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE],
            ),
            Section::new(*b"ADAM", r#"{"kind":"optimizer"}"#.into(), vec![0.125; 7]),
        ]
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.dnet");
        write_sections(&path, &sample()).unwrap();
        let back = read_sections(&path, *b"DNET").unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in sample().iter().zip(&back) {
            assert_eq!(a.magic, b.magic);
            assert_eq!(a.metadata, b.metadata);
            assert_eq!(a.payload, b.payload);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_sections(&path, &sample()).unwrap();
        let err = read_sections(&path, *b"DCLS").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.dnet");
        write_sections(&path, &sample()).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        // Flip a byte inside the first payload: after magic(4) + version(4)
        // + meta_len(4) + metadata + count(8).
        let meta_len = sample()[0].metadata.len();
        let idx = 4 + 4 + 4 + meta_len + 8 + 5;
        raw[idx] ^= 0x40;
        std::fs::write(&path, &raw).unwrap();
        let err = read_sections(&path, *b"DNET").unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.dnet");
        write_sections(&path, &sample()).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 3]).unwrap();
        let err = read_sections(&path, *b"DNET").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn version_gate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.dnet");
        write_sections(&path, &sample()).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[4] = 99; // low byte of the version word
        std::fs::write(&path, &raw).unwrap();
        let err = read_sections(&path, *b"DNET").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
