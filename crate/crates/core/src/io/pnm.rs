//! Binary PGM (P5) and PPM (P6), 8 and 16 bit.

use std::path::Path;

use super::{read_all, write_all};
use crate::error::{Error, Result};
use crate::field::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::TruncatedFile);
    }
    let magic = [bytes[0], bytes[1]];
    if magic != *b"P5" && magic != *b"P6" {
        return Err(Error::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                None => return Err(Error::TruncatedFile),
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("expected a number in PNM header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..pos]).map_err(|e| Error::Parse(e.to_string()))?;
        *field = s
            .parse()
            .map_err(|_| Error::Parse(format!("bad PNM header value {s}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        None => return Err(Error::TruncatedFile),
        Some(_) => return Err(Error::Parse("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("invalid PNM dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedMaxval(maxval.min(u32::MAX as u64) as u32));
    }
    Ok(Header {
        magic,
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        offset: pos,
    })
}

/// Decode P5 or P6; samples are scaled to `[0, 1]` by the maxval.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let channels = if h.magic == *b"P5" { 1 } else { 3 };
    let wide = h.maxval > 255;
    let n = h.width * h.height * channels;
    let need = n * if wide { 2 } else { 1 };
    let body = &bytes[h.offset..];
    if body.len() < need {
        return Err(Error::TruncatedFile);
    }
    let maxval = h.maxval as f64;
    let data = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval)
            .collect()
    } else {
        body[..need].iter().map(|&b| b as f64 / maxval).collect()
    };
    Image::from_vec(h.width, h.height, channels, data)
}

pub fn encode_pnm(img: &Image, depth: BitDepth) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Parse(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let maxval = depth.maxval();
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    Ok(out)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&read_all(path)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let img = read_pnm(path)?;
    if img.channels() != 1 {
        return Err(Error::Parse("expected a grayscale (P5) image".into()));
    }
    Ok(img)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let img = read_pnm(path)?;
    if img.channels() != 3 {
        return Err(Error::Parse("expected a color (P6) image".into()));
    }
    Ok(img)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::Parse("PGM needs one channel".into()));
    }
    write_all(path, &encode_pnm(img, depth)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Parse("PPM needs three channels".into()));
    }
    write_all(path, &encode_pnm(img, depth)?)
}
