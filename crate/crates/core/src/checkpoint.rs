//! Checkpoint container: a JSON header followed by named tensors.
//!
//! Layout (little-endian): `UCKP` | version u32 | header length u32 |
//! header JSON | tensor count u32 | per tensor: name length u32, UTF-8
//! name, TNSR record.

use std::io::Read;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::io_util::{read_exact, write_atomic};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = read_u32(&mut r, "checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = read_u32(&mut r, "checkpoint header length")? as usize;
        let mut hbuf = vec![0u8; hlen.min(r.len())];
        if hbuf.len() < hlen {
            return Err(Error::format("truncated checkpoint header"));
        }
        read_exact(&mut r, &mut hbuf, "checkpoint header")?;
        let header = serde_json::from_slice(&hbuf).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = read_u32(&mut r, "tensor name length")? as usize;
            if nlen > r.len() {
                return Err(Error::format("truncated tensor name"));
            }
            let mut nbuf = vec![0u8; nlen];
            read_exact(&mut r, &mut nbuf, "tensor name")?;
            let name = String::from_utf8(nbuf).map_err(|_| Error::format("tensor name is not UTF-8"))?;
            tensors.push((name, read_tensor(&mut r)?));
        }
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Removes and returns the tensors whose names start with `prefix`,
    /// with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor)> {
        let (hit, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.tensors)
            .into_iter()
            .partition(|(n, _)| n.starts_with(prefix));
        self.tensors = keep;
        hit.into_iter()
            .map(|(n, t)| (n[prefix.len()..].to_string(), t))
            .collect()
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format("length overflows u32"))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            header: serde_json::json!({"kind": "test", "step": 3}),
            tensors: vec![
                ("a".into(), Tensor::from_fn(&[2, 3], |i| i as f32 - 1.5)),
                ("b.c".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn prefix_extraction() {
        let mut c = sample();
        let got = c.take_prefixed("b.");
        assert_eq!(got[0].0, "c");
        assert_eq!(c.tensors.len(), 1);
    }
}
