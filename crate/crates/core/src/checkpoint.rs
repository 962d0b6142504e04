//! Flat little-endian container of named float64 arrays.
//!
//! Layout:
//!
//! ```text
//! magic   4 bytes  "CEAR"
//! version u32
//! nheader u32, then nheader x u64     (dims header)
//! narrays u32
//! per array: name_len u16, name utf-8, len u64, len x f64
//! ```

use std::path::Path;

use crate::error::{ensure, CeError, Result};

const MAGIC: &[u8; 4] = b"CEAR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArrays {
    pub header: Vec<u64>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl NamedArrays {
    pub fn new(header: Vec<u64>) -> Self {
        NamedArrays {
            header,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, values: &[f64]) {
        self.arrays.push((name.to_string(), values.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| CeError::Config(format!("checkpoint is missing array `{name}`")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.arrays.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for h in &self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, Config, "not a checkpoint (bad magic)");
        let version = r.u32()?;
        ensure!(
            version == VERSION,
            Config,
            "unsupported checkpoint version {version}"
        );
        let nh = r.u32()? as usize;
        let header = (0..nh).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let na = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(na);
        for _ in 0..na {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CeError::Config("array name is not utf-8".into()))?
                .to_string();
            let n = r.u64()? as usize;
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push((name, values));
        }
        ensure!(r.pos == bytes.len(), Config, "trailing bytes in checkpoint");
        Ok(NamedArrays { header, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::report::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        NamedArrays::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.bytes.len(),
            Config,
            "truncated checkpoint"
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            header in proptest::collection::vec(any::<u64>(), 0..5),
            arrays in proptest::collection::vec(("[a-z_]{1,12}", proptest::collection::vec(any::<f64>(), 0..20)), 0..6),
        ) {
            let mut c = NamedArrays::new(header);
            for (name, v) in &arrays {
                c.push(name, v);
            }
            let bytes = c.to_bytes();
            let back = NamedArrays::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let mut c = NamedArrays::new(vec![1, 2]);
        c.push("a", &[1.0, 2.0]);
        let bytes = c.to_bytes();
        assert!(NamedArrays::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(NamedArrays::from_bytes(b"nope").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(NamedArrays::from_bytes(&extra).is_err());
    }
}
