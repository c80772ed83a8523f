//! "RGD1" scalar maps: magic, u32 LE width and height, then f32 LE values.

use std::path::Path;

use super::{read_all, write_all, Cursor};
use crate::error::{Error, Result};
use crate::field::ScalarField;

pub const RGD_MAGIC: &[u8; 4] = b"RGD1";

pub fn encode_scalar_map(f: &ScalarField) -> Result<Vec<u8>> {
    let (w, h) = f.dims();
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Parse(format!("dimension {v} too large")));
    let mut out = Vec::with_capacity(12 + 4 * w * h);
    out.extend_from_slice(RGD_MAGIC);
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    for &v in f.data() {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_scalar_map(bytes: &[u8]) -> Result<ScalarField> {
    let mut c = Cursor::new(bytes);
    if c.take(4)? != RGD_MAGIC {
        return Err(Error::BadMagic);
    }
    let w = c.u32_le()? as usize;
    let h = c.u32_le()? as usize;
    if w == 0 || h == 0 {
        return Err(Error::Parse(format!("invalid map dimensions {w}x{h}")));
    }
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Parse("map dimensions overflow".into()))?;
    if c.remaining() < 4 * n {
        return Err(Error::TruncatedFile);
    }
    let data = (0..n).map(|_| c.f32_le().map(f64::from)).collect::<Result<Vec<_>>>()?;
    ScalarField::from_vec(w, h, data)
}

pub fn write_scalar_map(path: impl AsRef<Path>, f: &ScalarField) -> Result<()> {
    write_all(path, &encode_scalar_map(f)?)
}

pub fn read_scalar_map(path: impl AsRef<Path>) -> Result<ScalarField> {
    decode_scalar_map(&read_all(path)?)
}
