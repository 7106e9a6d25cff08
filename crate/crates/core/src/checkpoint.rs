//! Binary parameter container shared by every trained component.
//!
//! Layout (all integers `u32` little-endian):
//! `b"ASPC"`, version, config-echo length + UTF-8 text, parameter count, then
//! per parameter: name length, name, rank, dims, row-major `f32` LE payload.

use std::path::Path;

use crate::autograd::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ASPC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(config: impl Into<String>, set: &ParamSet) -> Self {
        Self { config: config.into(), params: set.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every stored tensor into the same-named slot of `set`.
    pub fn load_into(&self, set: &mut ParamSet) -> Result<()> {
        if self.params.len() != set.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                set.len()
            )));
        }
        for (name, t) in &self.params {
            let id = set.find(name).ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if set.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model shape {:?}",
                    t.shape(),
                    set.get(id).shape()
                )));
            }
            *set.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config.len() as u32);
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, 2);
            put_u32(&mut out, t.rows() as u32);
            put_u32(&mut out, t.cols() as u32);
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(Error::Checkpoint(format!("parameter {name}: rank {rank} unsupported"))),
            };
            let payload = r.take(rows * cols * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Canonical `key = value` lines used as the config echo.
#[derive(Debug, Default, Clone)]
pub struct ConfigEcho {
    lines: Vec<(String, String)>,
}

impl ConfigEcho {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.lines.push((key.to_string(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        self.lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Vec<(String, String)> {
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("config echo lacks `{key}`")))
    }
}
