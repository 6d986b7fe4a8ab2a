//! The `SDND` model container.
//!
//! All integers are little-endian `u32`, all values little-endian `f32`.
//!
//! ```text
//! "SDND"  version(=1)  c  k  d  skip_topology  n_tensors
//! n_tensors × { len, len × f32 }
//! ```
//!
//! Tensor order: for each of the 10 conv layers, its weights
//! (`[out][in][kz][ky][kx]`) and bias, followed for layers 1-9 by the
//! batch-norm gamma, beta, running mean and running variance.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{DenoiserModel, Network, N_LAYERS, SKIP_TOPOLOGY_MUNET};

pub const MODEL_MAGIC: &[u8; 4] = b"SDND";
pub const MODEL_VERSION: u32 = 1;

fn tensors(m: &DenoiserModel) -> Vec<&Vec<f32>> {
    let mut out = Vec::new();
    for (l, conv) in m.convs.iter().enumerate() {
        out.push(&conv.weight);
        out.push(&conv.bias);
        if let Some(bn) = m.bns.get(l) {
            out.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]);
        }
    }
    out
}

fn tensors_mut(m: &mut DenoiserModel) -> Vec<&mut Vec<f32>> {
    let mut out = Vec::new();
    let mut bns = m.bns.iter_mut();
    for conv in m.convs.iter_mut() {
        out.push(&mut conv.weight);
        out.push(&mut conv.bias);
        if let Some(bn) = bns.next() {
            out.extend([&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]);
        }
    }
    out
}

pub fn encode_model(m: &DenoiserModel) -> Vec<u8> {
    let ts = tensors(m);
    let mut out = Vec::with_capacity(32 + ts.iter().map(|t| 4 + 4 * t.len()).sum::<usize>());
    out.extend_from_slice(MODEL_MAGIC);
    for v in [MODEL_VERSION, m.channels() as u32, m.width() as u32, m.kernel() as u32, m.skip_topology(), ts.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in ts {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("model file truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Architecture `(c, k, d)` from the header, then the tensors.
fn parse(buf: &[u8]) -> Result<([usize; 3], Vec<Vec<f32>>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not an SDND model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Unsupported(format!("model format version {version}")));
    }
    let (c, k, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let topo = r.u32()?;
    if topo != SKIP_TOPOLOGY_MUNET {
        return Err(Error::Unsupported(format!("skip topology {topo}")));
    }
    let n = r.u32()? as usize;
    let expected = 2 * N_LAYERS + 4 * (N_LAYERS - 1);
    if n != expected {
        return Err(Error::Format(format!("model has {n} tensors, expected {expected}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let bytes = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor length overflow".into()))?)?;
        out.push(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after model", buf.len() - r.pos)));
    }
    Ok(([c, k, d], out))
}

fn fill(m: &mut DenoiserModel, data: Vec<Vec<f32>>) -> Result<()> {
    for (slot, t) in tensors_mut(m).into_iter().zip(data) {
        if slot.len() != t.len() {
            return Err(Error::Format(format!("tensor has {} values, architecture needs {}", t.len(), slot.len())));
        }
        *slot = t;
    }
    Ok(())
}

pub fn decode_model(buf: &[u8]) -> Result<DenoiserModel> {
    let ([c, k, d], data) = parse(buf)?;
    if c == 0 || k == 0 || d % 2 == 0 {
        return Err(Error::Format(format!("invalid architecture c={c} k={k} d={d}")));
    }
    let mut m = Network::build(c, k, d, 0)?;
    fill(&mut m, data)?;
    Ok(m)
}

/// Loads weights into a model of known architecture; a file for a different
/// architecture is a shape error.
pub fn decode_model_into(buf: &[u8], m: &mut DenoiserModel) -> Result<()> {
    let ([c, k, d], data) = parse(buf)?;
    if [c, k, d] != [m.channels(), m.width(), m.kernel()] {
        return Err(Error::Shape(format!(
            "model file is c={c} k={k} d={d}, slot is c={} k={} d={}",
            m.channels(),
            m.width(),
            m.kernel()
        )));
    }
    fill(m, data)
}

pub fn save_model(m: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_model_into(path: impl AsRef<Path>, m: &mut DenoiserModel) -> Result<()> {
    let path = path.as_ref();
    decode_model_into(&std::fs::read(path).map_err(|e| Error::io(path, e))?, m)
}
