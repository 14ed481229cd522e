//! Binary checkpoint: `DDAC`, format version, geometry header, tensor
//! count, then per tensor its name, rank, dims and little-endian f64 values.
//! Integers are little-endian u32, dims u64.

use std::path::Path;

use super::{DetectorGeometry, ModelParams};
use crate::error::{Error, Result};
use crate::fsio;
use crate::ndgrad::Tensor;

const MAGIC: &[u8; 4] = b"DDAC";
const VERSION: u32 = 1;

pub fn encode_checkpoint(p: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * p.num_values());
    out.extend_from_slice(MAGIC);
    let mut u32s = vec![VERSION, p.geometry.input as u32];
    u32s.extend(p.geometry.strides.iter().map(|&s| s as u32));
    u32s.extend([p.geometry.m as u32, p.geometry.c as u32]);
    u32s.extend(p.geometry.widths.iter().map(|&w| w as u32));
    u32s.push(p.tensors.len() as u32);
    for v in u32s {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in &p.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("checkpoint truncated reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::UnsupportedFormat("not a DDAC checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::UnsupportedFormat(format!("checkpoint version {version}")));
    }
    let input = r.u32("geometry")?;
    let strides = [r.u32("geometry")?, r.u32("geometry")?, r.u32("geometry")?];
    let (m, c) = (r.u32("geometry")?, r.u32("geometry")?);
    let mut widths = [0; 4];
    for w in &mut widths {
        *w = r.u32("geometry")?;
    }
    let geometry = DetectorGeometry { input, strides, m, c, widths };
    geometry.validate()?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse { offset: r.pos, detail: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32("rank")?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("dims")?);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            Error::Parse { offset: r.pos, detail: format!("tensor {name} too large") }
        })?;
        let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: "trailing bytes after checkpoint".into(),
        });
    }
    let p = ModelParams { geometry, tensors };
    p.validate()?;
    Ok(p)
}

pub fn write_checkpoint(path: &Path, p: &ModelParams) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(p))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fsio::read_bytes(path)?)
}
