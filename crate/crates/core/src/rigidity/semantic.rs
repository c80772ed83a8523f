//! External semantic rigidity maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{BinaryMask, ScalarField};
use crate::io::{decode_pnm, decode_scalar_map, RGD_MAGIC};

/// Semantic probability at or above which a pixel hints "rigid".
pub const SEMANTIC_THRESHOLD: f64 = 0.5;

/// Load a rigidity probability map (8/16-bit PGM or RGD1) and clamp it to
/// `[0, 1]`. With `assume_unknown`, a missing path or file gives a constant
/// 0.5 map.
pub fn load_semantic_rigidity(path: Option<&Path>, dims: (usize, usize), assume_unknown: bool) -> Result<ScalarField> {
    let unknown = || ScalarField::constant(dims.0, dims.1, 0.5);
    let path = match path {
        Some(p) if p.exists() => p,
        Some(p) if !assume_unknown => {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("semantic map {} not found", p.display()),
            )))
        }
        None if !assume_unknown => return Err(Error::InvalidConfig("no semantic map given".into())),
        _ => return Ok(unknown()),
    };
    let bytes = std::fs::read(path)?;
    let field = if bytes.starts_with(RGD_MAGIC) {
        decode_scalar_map(&bytes)?
    } else {
        let img = decode_pnm(&bytes)?;
        if img.channels() != 1 {
            return Err(Error::Parse("semantic map must be a grayscale PGM".into()));
        }
        ScalarField::from_vec(img.width(), img.height(), img.data().to_vec())?
    };
    if field.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: field.dims(),
        });
    }
    Ok(field.map(|v| v.clamp(0.0, 1.0)))
}

/// Rigid-hint mask from a semantic probability map.
pub fn rigid_hint(p_sem: &ScalarField) -> BinaryMask {
    BinaryMask::threshold(p_sem, SEMANTIC_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{encode_scalar_map, write_pgm, BitDepth};
    use crate::Image;

    #[test]
    fn sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sem.pgm");
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0xFF, 0xFF, 0, 0]);
        std::fs::write(&p, bytes).unwrap();
        let f = load_semantic_rigidity(Some(&p), (2, 1), false).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0]);
    }

    #[test]
    fn rgd_clamped_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sem.rgd");
        std::fs::write(
            &p,
            encode_scalar_map(&ScalarField::from_fn(3, 2, |x, _| x as f64 - 0.5)).unwrap(),
        )
        .unwrap();
        let f = load_semantic_rigidity(Some(&p), (3, 2), false).unwrap();
        assert_eq!(f.get(0, 0), 0.0);
        assert_eq!(f.get(1, 0), 0.5);
        assert_eq!(f.get(2, 0), 1.0);
        assert!(matches!(
            load_semantic_rigidity(Some(&p), (4, 2), false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("absent.pgm");
        let f = load_semantic_rigidity(Some(&p), (8, 8), true).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.5));
        assert!(load_semantic_rigidity(Some(&p), (8, 8), false).is_err());
        let img = Image::from_fn(8, 8, |_, _| 1.0);
        write_pgm(&p, &img, BitDepth::Eight).unwrap();
        assert!(load_semantic_rigidity(Some(&p), (8, 8), false)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }
}
