//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ZOCKPT\0\0"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
//!          values f64 * prod(dims)
//! ```
//!
//! Entries keep the order they were written in.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::layers::Module;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ZOCKPT\0\0";
pub const VERSION: u32 = 1;

const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Snapshot of every persisted tensor of `module`, under `prefix`.
    pub fn from_module(module: &dyn Module, prefix: &str) -> Self {
        let mut ck = Self::new();
        ck.extend_from_module(module, prefix);
        ck
    }

    pub fn extend_from_module(&mut self, module: &dyn Module, prefix: &str) {
        module.visit_state(prefix, &mut |name, t| self.push(name, t.clone()));
    }

    /// Overwrites the persisted tensors of `module` from entries under
    /// `prefix`. Every tensor the module expects must be present with the
    /// same shape.
    pub fn load_into(&self, module: &mut dyn Module, prefix: &str) -> Result<()> {
        let index: HashMap<&str, &Tensor> =
            self.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut problems = Vec::new();
        module.visit_state_mut(prefix, &mut |name, dst| match index.get(name) {
            Some(src) if src.shape() == dst.shape() => *dst = (*src).clone(),
            Some(src) => problems.push(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                src.shape(),
                dst.shape()
            )),
            None => problems.push(format!("{name}: missing from checkpoint")),
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::parse(0, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::parse(8, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::parse(at + 4, "entry name is not UTF-8"))?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(Error::parse(r.pos - 4, format!("{name}: ndim {ndim} out of range")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64("dim")?)
                    .map_err(|_| Error::parse(r.pos - 8, "dimension too large"))?;
                if d == 0 {
                    return Err(Error::parse(r.pos - 8, format!("{name}: zero dimension")));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::parse(r.pos - 8, "element count overflows"))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(8)
                .ok_or_else(|| Error::parse(r.pos, "element count overflows"))?;
            let raw = r.take(nbytes, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::parse(
                self.pos,
                format!("truncated {what}: expected {n} bytes, {remaining} available"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::decode(b"NOTACKPT\x01\0\0\0\0\0\0\0").is_err());
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::full(&[2, 2], 1.5));
        let bytes = ck.encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated values"), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut ck = Checkpoint::new();
        ck.push("a", Tensor::scalar(-0.0));
        let b = ck.encode();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], b'a');
        assert_eq!(b.len(), 8 + 4 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(
            entries in proptest::collection::vec(
                ("[a-z.]{1,12}", proptest::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..5,
            )
        ) {
            let mut ck = Checkpoint::new();
            for (name, shape, bits) in entries {
                let t = Tensor::from_fn(&shape, |i| f64::from_bits(bits.wrapping_add(i as u64 * 0x9E37)));
                ck.push(name, t);
            }
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
