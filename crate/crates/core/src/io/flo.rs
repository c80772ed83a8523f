//! Middlebury `.flo` files.

use std::path::Path;

use super::{read_all, write_all, Cursor};
use crate::error::{Error, Result};
use crate::field::FlowField;

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    if !flow.is_finite() {
        return Err(Error::NonFinite);
    }
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(FLO_MAGIC);
    let dim = |v: usize| i32::try_from(v).map_err(|_| Error::Parse(format!("dimension {v} too large")));
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&(v[0] as f32).to_le_bytes());
        out.extend_from_slice(&(v[1] as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let mut c = Cursor::new(bytes);
    if c.take(4)? != FLO_MAGIC {
        return Err(Error::BadMagic);
    }
    let w = c.i32_le()?;
    let h = c.i32_le()?;
    if w <= 0 || h <= 0 {
        return Err(Error::Parse(format!("invalid flow dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Parse("flow dimensions overflow".into()))?;
    if c.remaining() < n * 8 {
        return Err(Error::TruncatedFile);
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let u = c.f32_le()? as f64;
        let v = c.f32_le()? as f64;
        data.push([u, v]);
    }
    FlowField::from_vec(w, h, data)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write_all(path, &encode_flo(flow)?)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&read_all(path)?)
}
