//! Little-endian binary container for tensors plus a JSON metadata string.
//!
//! ```text
//! magic "DPRK" | version u16 | kind u8 | meta_len u32 | meta (UTF-8 JSON)
//! n_entries u32 | entries...
//! entry: name_len u16 | name | rank u8 | dims u32 × rank | f64 × numel
//! ```
//!
//! Decoding never trusts a length field: every read is bounds-checked
//! against the remaining input before allocation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checked_numel, Tensor};

pub const MAGIC: &[u8; 4] = b"DPRK";
pub const VERSION: u16 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Dataset,
    Model,
    Reconstruction,
}

impl ContainerKind {
    fn code(self) -> u8 {
        match self {
            ContainerKind::Dataset => 1,
            ContainerKind::Model => 2,
            ContainerKind::Reconstruction => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(ContainerKind::Dataset),
            2 => Ok(ContainerKind::Model),
            3 => Ok(ContainerKind::Reconstruction),
            other => Err(Error::Format(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub kind: ContainerKind,
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: ContainerKind, meta: impl Into<String>) -> Self {
        Container {
            kind,
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn entry(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing entry {name:?}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|(n, t)| n.len() + 8 * t.len() + 64).sum();
        let mut out = Vec::with_capacity(16 + self.meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not a DPRK container".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = ContainerKind::from_code(r.u8("kind")?)?;
        let meta_len = r.u32("meta length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "meta")?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?
            .to_string();
        let n_entries = r.u32("entry count")? as usize;
        let mut entries = Vec::new();
        for i in 0..n_entries {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Format(format!("entry {name:?}: rank {rank} outside 1..={MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = checked_numel(&shape)
                .ok_or_else(|| Error::Format(format!("entry {name:?}: shape {shape:?} overflows")))?;
            let bytes_needed = numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format(format!("entry {name:?}: size overflow")))?;
            let raw = r.take(bytes_needed, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { kind, meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        Container::decode(&std::fs::read(path)?)
    }

    /// Human-readable sidecar. Non-finite values are not representable in
    /// JSON, so containers holding them are rejected.
    pub fn to_json(&self) -> Result<String> {
        if let Some((name, _)) = self.entries.iter().find(|(_, t)| t.contains_non_finite()) {
            return Err(Error::Format(format!("entry {name:?} holds non-finite values")));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Container> {
        let c: Container = serde_json::from_str(text)?;
        for (name, t) in &c.entries {
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .map_err(|e| Error::Format(format!("entry {name:?}: {e}")))?;
        }
        Ok(c)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, {remaining} left",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new(ContainerKind::Model, r#"{"k":1}"#);
        c.push("w", Tensor::new(vec![2, 3], vec![1.0, -0.0, 2.5, f64::MIN_POSITIVE, 1e300, -7.0]).unwrap());
        c.push("b", Tensor::vector(vec![f64::NAN]));
        c
    }

    #[test]
    fn round_trip_preserves_bits() {
        let c = sample();
        let back = Container::decode(&c.encode()).unwrap();
        assert_eq!(back.kind, c.kind);
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = Container::new(ContainerKind::Dataset, "").encode();
        assert_eq!(bytes, [b'D', b'P', b'R', b'K', 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().encode();
        bytes.push(0);
        assert!(Container::decode(&bytes).is_err());
    }

    #[test]
    fn huge_declared_shape_does_not_allocate() {
        let mut bytes = Container::new(ContainerKind::Model, "").encode();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(2);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Container::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn json_sidecar_round_trip() {
        let mut c = sample();
        c.entries.pop();
        let back = Container::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(sample().to_json().is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Container::decode(&bytes);
        }

        #[test]
        fn mutated_valid_input_never_panics(idx in 0usize..200, byte in any::<u8>()) {
            let mut bytes = sample().encode();
            let i = idx % bytes.len();
            bytes[i] = byte;
            let _ = Container::decode(&bytes);
        }
    }
}
