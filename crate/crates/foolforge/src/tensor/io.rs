//! Binary tensor container and checksummed archive framing.
//!
//! A tensor container is `"FFTN"`, a little-endian u32 version, a u32 rank,
//! `rank` u64 dims and the row-major f64 payload. An archive bundles a kind
//! tag, a TOML header and named tensor containers, followed by a SHA-256 of
//! everything before it; truncation or bit rot surfaces as a checksum error
//! before any parsing happens.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"FFTN";
pub const TENSOR_VERSION: u32 = 1;
pub const ARCHIVE_MAGIC: &[u8; 8] = b"FFARCH01";

/// Upper bound on elements read back, to fail cleanly on corrupt dims.
const MAX_ELEMENTS: u64 = 1 << 30;

/// Serializes one tensor container.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Deserializes one tensor container, validating magic, version and payload.
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!(
            "bad tensor magic {:02x?}",
            magic
        )));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = u64::from_le_bytes(b);
        numel = numel.saturating_mul(d.max(1));
        shape.push(d as usize);
    }
    if numel > MAX_ELEMENTS {
        return Err(TensorError::Format(format!(
            "tensor of {numel} elements exceeds the read limit"
        )));
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        let v = f64::from_le_bytes(b);
        if !v.is_finite() {
            return Err(TensorError::Format("non-finite tensor payload".into()));
        }
        data.push(v);
    }
    Tensor::new(&shape, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A kind tag, free-form TOML header and ordered named tensors.
#[derive(Debug, Clone)]
pub struct Archive {
    pub kind: String,
    pub header: toml::Table,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: &str, header: toml::Table) -> Self {
        Self {
            kind: kind.to_string(),
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Writes an archive with its trailing SHA-256.
pub fn write_archive(path: &Path, archive: &Archive) -> Result<(), TensorError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    write_str(&mut buf, &archive.kind)?;
    let header = toml::to_string(&archive.header)
        .map_err(|e| TensorError::Format(format!("header serialization: {e}")))?;
    write_str(&mut buf, &header)?;
    buf.extend_from_slice(&(archive.tensors.len() as u32).to_le_bytes());
    for (name, t) in &archive.tensors {
        write_str(&mut buf, name)?;
        write_tensor(&mut buf, t)?;
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads an archive written by [`write_archive`], verifying the checksum
/// before parsing anything else.
pub fn read_archive(path: &Path) -> Result<Archive, TensorError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < ARCHIVE_MAGIC.len() + 32 {
        return Err(TensorError::Format(
            "checksum mismatch: file shorter than its framing".into(),
        ));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(TensorError::Format(
            "checksum mismatch: archive truncated or corrupted".into(),
        ));
    }
    let mut cur = body;
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(TensorError::Format(format!(
            "bad archive magic {:02x?}",
            magic
        )));
    }
    let kind = read_str(&mut cur)?;
    let header_text = read_str(&mut cur)?;
    let header: toml::Table = toml::from_str(&header_text)
        .map_err(|e| TensorError::Format(format!("header parse: {e}")))?;
    let count = read_u32(&mut cur)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut cur)?;
        let t = read_tensor(&mut cur)?;
        tensors.push((name, t));
    }
    Ok(Archive {
        kind,
        header,
        tensors,
    })
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<(), TensorError> {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_str(cur: &mut &[u8]) -> Result<String, TensorError> {
    let len = read_u32(cur)? as usize;
    if len > cur.len() {
        return Err(TensorError::Format("string length past end of file".into()));
    }
    let (s, rest) = cur.split_at(len);
    let out = String::from_utf8(s.to_vec())
        .map_err(|_| TensorError::Format("non-utf8 string field".into()))?;
    *cur = rest;
    Ok(out)
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, TensorError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin() * 1e-3 + 0.5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn scalar_and_empty_shapes_round_trip() {
        for t in [Tensor::scalar(2.5), Tensor::zeros(&[0]), Tensor::zeros(&[3, 0, 2])] {
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            assert_eq!(t, back);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf[0] = b'X';
        let err = read_tensor(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, TensorError::Format(_)));
    }

    #[test]
    fn archive_round_trip_preserves_header_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ffa");
        let mut header = toml::Table::new();
        header.insert("note".into(), toml::Value::String("hello".into()));
        let mut a = Archive::new("demo", header);
        a.push("b_second", Tensor::full(&[2, 2], 2.0));
        a.push("a_first", Tensor::full(&[3], 1.0));
        write_archive(&path, &a).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back.kind, "demo");
        assert_eq!(
            back.header.get("note").and_then(|v| v.as_str()),
            Some("hello")
        );
        assert_eq!(back.tensors[0].0, "b_second");
        assert_eq!(back.tensors[1].0, "a_first");
        assert_eq!(back.tensor("a_first").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncated_archive_fails_with_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ffa");
        let mut a = Archive::new("demo", toml::Table::new());
        a.push("t", Tensor::from_fn(&[64], |i| i as f64));
        write_archive(&path, &a).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_archive(&path).unwrap_err();
        match err {
            TensorError::Format(msg) => assert!(msg.contains("checksum"), "got: {msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_fails_with_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flip.ffa");
        let mut a = Archive::new("demo", toml::Table::new());
        a.push("t", Tensor::full(&[16], 1.0));
        write_archive(&path, &a).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_archive(&path).unwrap_err(),
            TensorError::Format(_)
        ));
    }
}
