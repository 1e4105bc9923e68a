//! CL3W weight files.
//!
//! ```text
//! "CL3W" | version u8 | [frozen_depth u8, version 2 only] | layers u32
//!        | per layer: rows u32, cols u32
//!        | all weights, layer by layer, row-major f64
//!        | all biases, layer by layer, f64
//!        | crc32 (IEEE) of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Version 1 is written when no
//! layer is frozen; version 2 carries the frozen depth.

use ndarray::{Array1, Array2};

use super::Mlp;
use crate::error::{Error, Result};

pub const CL3W_MAGIC: &[u8; 4] = b"CL3W";
const V_PLAIN: u8 = 0x01;
const V_FROZEN: u8 = 0x02;

pub fn encode_cl3w(mlp: &Mlp) -> Vec<u8> {
    encode_with_depth(mlp, mlp.frozen_prefix() as u8)
}

/// Encodes with an explicit frozen depth, which may cover every layer
/// (a standalone pretrained backbone).
pub(crate) fn encode_with_depth(mlp: &Mlp, frozen_depth: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * mlp.num_layers() + 8 * mlp.param_count());
    out.extend_from_slice(CL3W_MAGIC);
    if frozen_depth == 0 {
        out.push(V_PLAIN);
    } else {
        out.push(V_FROZEN);
        out.push(frozen_depth);
    }
    out.extend_from_slice(&(mlp.num_layers() as u32).to_le_bytes());
    for w in mlp.weights() {
        out.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
    }
    for w in mlp.weights() {
        for v in w.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in mlp.biases() {
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::WeightFormat("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_cl3w(bytes: &[u8]) -> Result<Mlp> {
    let (mut mlp, depth) = decode_with_depth(bytes)?;
    mlp.set_frozen_prefix(depth)
        .map_err(|e| Error::WeightFormat(format!("invalid network: {e}")))?;
    Ok(mlp)
}

/// Decodes parameters and the recorded frozen depth; the returned network
/// itself has no frozen prefix.
pub(crate) fn decode_with_depth(bytes: &[u8]) -> Result<(Mlp, usize)> {
    if bytes.len() < 4 + 1 + 4 + 4 {
        return Err(Error::WeightFormat("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::WeightFormat("CRC mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(4)? != CL3W_MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let frozen = match cur.u8()? {
        V_PLAIN => 0,
        V_FROZEN => cur.u8()? as usize,
        v => return Err(Error::WeightFormat(format!("unsupported version {v:#04x}"))),
    };
    let layers = cur.u32()? as usize;
    if layers == 0 {
        return Err(Error::WeightFormat("zero layers".into()));
    }
    let mut shapes = Vec::new();
    for _ in 0..layers {
        shapes.push((cur.u32()? as usize, cur.u32()? as usize));
    }
    let total: usize = shapes
        .iter()
        .map(|&(r, c)| r.saturating_mul(c).saturating_add(c))
        .fold(0usize, |a, b| a.saturating_add(b));
    if total.saturating_mul(8) != body.len() - cur.pos {
        return Err(Error::WeightFormat(format!(
            "payload holds {} bytes, shapes need {}",
            body.len() - cur.pos,
            total.saturating_mul(8)
        )));
    }
    let mut weights = Vec::with_capacity(layers);
    for &(r, c) in &shapes {
        let mut vals = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            vals.push(cur.f64()?);
        }
        weights.push(Array2::from_shape_vec((r, c), vals).expect("shape checked"));
    }
    let mut biases = Vec::with_capacity(layers);
    for &(_, c) in &shapes {
        let mut vals = Vec::with_capacity(c);
        for _ in 0..c {
            vals.push(cur.f64()?);
        }
        biases.push(Array1::from(vals));
    }
    let mlp = Mlp::from_parts(weights, biases, 0)
        .map_err(|e| Error::WeightFormat(format!("invalid network: {e}")))?;
    if frozen > layers {
        return Err(Error::WeightFormat(format!(
            "frozen depth {frozen} exceeds {layers} layers"
        )));
    }
    Ok((mlp, frozen))
}
