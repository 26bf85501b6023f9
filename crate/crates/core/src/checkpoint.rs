//! Versioned binary container for named parameter sets.
//!
//! Layout (all integers little-endian):
//! `"PALETTE1"`, `u32` version, `u32` section count, then per section a
//! name, a list of string hyperparameters and a list of tensors. Strings are
//! `u32` length plus UTF-8 bytes; tensors are name, `u32` rank, `u64` dims and
//! `f64` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Params, Tensor};

pub const MAGIC: &[u8; 8] = b"PALETTE1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub hyper: Vec<(String, String)>,
    pub params: Params,
}

impl Section {
    pub fn hyper(&self, key: &str) -> Option<&str> {
        self.hyper.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn hyper_usize(&self, key: &str) -> Result<usize> {
        self.hyper_parse(key)
    }

    pub fn hyper_f64(&self, key: &str) -> Result<f64> {
        self.hyper_parse(key)
    }

    fn hyper_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .hyper(key)
            .ok_or_else(|| Error::Format { what: "checkpoint", msg: format!("section {:?} lacks hyperparameter {key:?}", self.name) })?;
        raw.parse().map_err(|_| Error::Format { what: "checkpoint", msg: format!("hyperparameter {key:?} has unparsable value {raw:?}") })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.sections.len() as u32);
        for s in &self.sections {
            put_str(&mut out, &s.name);
            put_u32(&mut out, s.hyper.len() as u32);
            for (k, v) in &s.hyper {
                put_str(&mut out, k);
                put_str(&mut out, v);
            }
            put_u32(&mut out, s.params.len() as u32);
            for (name, t) in s.params.iter() {
                put_str(&mut out, name);
                put_u32(&mut out, t.shape().len() as u32);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let n = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let mut hyper = Vec::new();
            for _ in 0..r.u32()? {
                hyper.push((r.string()?, r.string()?));
            }
            let mut params = Params::new();
            for _ in 0..r.u32()? {
                let pname = r.string()?;
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize);
                }
                let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("tensor too large"))?;
                if len.checked_mul(8).is_none_or(|b| b > r.buf.len() - r.pos) {
                    return Err(r.err("truncated tensor data"));
                }
                let data = r.take(len * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                let t = Tensor::new(shape, data).map_err(|e| r.err(&e.to_string()))?;
                params.push(pname, t);
            }
            sections.push(Section { name, hyper, params });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format { what: "checkpoint", msg: format!("{msg} at byte {}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = Params::new();
        params.push("w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5e300]));
        params.push("b", Tensor::vector(vec![0.25]));
        Checkpoint { sections: vec![Section { name: "policy".into(), hyper: vec![("d".into(), "2".into())], params }] }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.section("policy").unwrap().hyper_usize("d").unwrap(), 2);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }
}
