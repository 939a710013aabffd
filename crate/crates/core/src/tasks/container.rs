//! Binary instance container.
//!
//! Layout (all integers and floats little-endian):
//! the 16-byte magic `GKMBMO-INSTANCE1`, a `u32` attribute count followed by
//! `(u32 len, utf-8 key, u32 len, utf-8 value)` pairs, then a `u32` array count
//! followed by `(u32 len, utf-8 name, u32 ndim, u64 dims…, f64 data…)` records.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 16] = b"GKMBMO-INSTANCE1";

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }
}

/// Named attributes and arrays, both kept in name order so that encoding is
/// canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub attrs: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

impl Container {
    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing attribute {key}")))
    }

    pub fn parse_attr<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.attr(key)?
            .parse()
            .map_err(|_| Error::Format(format!("attribute {key} is malformed")))
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays.get(name).ok_or_else(|| Error::Format(format!("missing array {name}")))
    }

    pub fn set_attr(&mut self, key: &str, value: impl ToString) {
        self.attrs.insert(key.to_string(), value.to_string());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.attrs.len() as u32).to_le_bytes());
        for (k, v) in &self.attrs {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(16)? != MAGIC {
            return Err(Error::Format("not a GKMBMO-INSTANCE1 container".into()));
        }
        let mut c = Container::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            c.attrs.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Format("array size overflow".into()))?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Format(format!("array {name} is truncated")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            c.arrays.insert(name, Array { shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(c)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Container::default();
        c.set_attr("prng", "chacha20");
        c.set_attr("seed", 7);
        c.arrays.insert("q".into(), Array::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 1e-300, f64::MAX]).unwrap());
        c.arrays.insert("b".into(), Array::vector(vec![]));
        let bytes = c.encode();
        assert_eq!(&bytes[..16], MAGIC);
        assert_eq!(Container::decode(&bytes).unwrap(), c);
        assert_eq!(c.parse_attr::<u64>("seed").unwrap(), 7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Container::decode(b"GKMBMO-INSTANCE0\0\0\0\0\0\0\0\0").is_err());
        let mut bytes = Container::default().encode();
        bytes.push(0);
        assert!(Container::decode(&bytes).is_err());
        let mut c = Container::default();
        c.arrays.insert("x".into(), Array::vector(vec![1.0, 2.0]));
        let bytes = c.encode();
        assert!(Container::decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
