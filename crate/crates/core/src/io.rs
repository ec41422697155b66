//! `BMPR1` named-tensor container.
//!
//! Layout: the five magic bytes `BMPR1`, then records until end of file:
//!
//! ```text
//! name_len: u32 LE | name: UTF-8 | rank: u32 LE | dims: u32 LE × rank | values: f64 LE × prod(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const MAGIC: &[u8; 5] = b"BMPR1";

/// Ordered list of named `f64` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    records: Vec<(String, Tensor<f64>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.records.push((name.into(), t));
    }

    pub fn records(&self) -> &[(String, Tensor<f64>)] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| corrupt(format!("missing tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut cur = &bytes[MAGIC.len()..];
        let mut file = Self::new();
        while !cur.is_empty() {
            let name_len = read_u32(&mut cur)? as usize;
            let name = take(&mut cur, name_len)?;
            let name = std::str::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_string();
            let rank = read_u32(&mut cur)? as usize;
            let dims = (0..rank).map(|_| read_u32(&mut cur).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| corrupt("dims overflow"))?;
            let raw = take(&mut cur, n.checked_mul(8).ok_or_else(|| corrupt("dims overflow"))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, values).map_err(|e| corrupt(format!("tensor {name:?}: {e}")))?;
            file.push(name, t);
        }
        Ok(file)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(corrupt("truncated record"));
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
}
