//! File formats, flow visualization and evaluation metrics.

pub mod color;
pub mod flo;
pub mod metrics;
pub mod pnm;
pub mod scalar_map;

pub use color::flow_to_color;
pub use flo::{decode_flo, encode_flo, read_flo, write_flo};
pub use metrics::{compute_metrics, epe, MetricReport};
pub use pnm::{decode_pnm, encode_pnm, read_pgm, read_pnm, read_ppm, write_pgm, write_ppm, BitDepth};
pub use scalar_map::{decode_scalar_map, encode_scalar_map, read_scalar_map, write_scalar_map, RGD_MAGIC};

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::BinaryMask;
use crate::Image;

fn with_path(path: &Path, e: std::io::Error) -> crate::error::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into()
}

pub(crate) fn read_all(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    std::fs::read(path.as_ref()).map_err(|e| with_path(path.as_ref(), e))
}

pub(crate) fn write_all(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path.as_ref(), bytes).map_err(|e| with_path(path.as_ref(), e))
}

/// Little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedFile);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn i32_le(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32_le(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

/// Masks are stored as 8-bit PGM with 0 / 255.
pub fn write_mask(path: impl AsRef<Path>, m: &BinaryMask) -> Result<()> {
    let img = Image::from_vec(
        m.width(),
        m.height(),
        1,
        m.data().iter().map(|&b| b as u8 as f64).collect(),
    )?;
    write_pgm(path, &img, BitDepth::Eight)
}

/// Any PGM, thresholded at one half.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = read_pgm(path)?;
    BinaryMask::from_vec(
        img.width(),
        img.height(),
        img.data().iter().map(|&v| v >= 0.5).collect(),
    )
}
