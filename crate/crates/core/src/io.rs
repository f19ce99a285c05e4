//! File formats: the SCRF1 raster format, binary PGM, and NNF persistence.
//!
//! SCRF1 layout (all integers little-endian):
//!
//! | offset | size | content                        |
//! |--------|------|--------------------------------|
//! | 0      | 5    | magic `SCRF1`                  |
//! | 5      | 1    | dtype tag, `b'f'` = f32        |
//! | 6      | 1    | endianness tag, `b'<'` = little|
//! | 7      | 1    | reserved, 0                    |
//! | 8      | 4    | height (u32)                   |
//! | 12     | 4    | width (u32)                    |
//! | 16     | 4    | depth (u32)                    |
//! | 20     | 4·H·W·d | f32 payload, row-major `(y, x, channel)` |

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::field::{FieldImage, PixelIndex, Shape};
use crate::patchmatch::NeighbourField;

pub const MAGIC: &[u8; 5] = b"SCRF1";
pub const DTYPE_F32: u8 = b'f';
pub const LITTLE_ENDIAN: u8 = b'<';
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported dtype tag {tag:#04x} at byte {offset}")]
    UnsupportedDtype { offset: usize, tag: u8 },
    #[error("unsupported endianness tag {tag:#04x} at byte {offset}")]
    UnsupportedEndianness { offset: usize, tag: u8 },
    #[error("zero dimension at byte {offset}")]
    ZeroDimension { offset: usize },
    #[error("dimensions overflow the addressable size (header byte {offset})")]
    DimensionOverflow { offset: usize },
    #[error("truncated at byte {offset}: expected {expected} bytes in total, found {found}")]
    Truncated { offset: usize, expected: usize, found: usize },
    #[error("{extra} unexpected trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("non-finite scalar at byte {offset}")]
    NonFinite { offset: usize },
    #[error("malformed PGM at byte {offset}: {reason}")]
    BadPgm { offset: usize, reason: String },
    #[error("nothing to export")]
    Empty,
    #[error("{0}")]
    Shape(#[from] crate::error::ScramError),
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn encode_field(field: &FieldImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * field.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[DTYPE_F32, LITTLE_ENDIAN, 0]);
    for d in [field.height(), field.width(), field.depth()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<FieldImage, FormatError> {
    if bytes.len() < HEADER_LEN {
        if !MAGIC.starts_with(&bytes[..bytes.len().min(5)]) {
            return Err(FormatError::BadMagic { offset: 0 });
        }
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..5] != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    if bytes[5] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype { offset: 5, tag: bytes[5] });
    }
    if bytes[6] != LITTLE_ENDIAN {
        return Err(FormatError::UnsupportedEndianness { offset: 6, tag: bytes[6] });
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, d) = (dim(8), dim(12), dim(16));
    for (value, offset) in [(h, 8), (w, 12), (d, 16)] {
        if value == 0 {
            return Err(FormatError::ZeroDimension { offset });
        }
    }
    let expected = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or(FormatError::DimensionOverflow { offset: 8 })?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            offset: expected,
            extra: bytes.len() - expected,
        });
    }
    let mut data = Vec::with_capacity(h * w * d);
    for (t, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite { offset: HEADER_LEN + 4 * t });
        }
        data.push(v);
    }
    Ok(FieldImage::new(h, w, d, data)?)
}

pub fn write_field(field: &FieldImage, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_field(field))?;
    Ok(())
}

/// Reads an SCRF1 file, or a binary PGM (`P5`) mapped to `[0, 1]`.
pub fn read_field(path: &Path) -> Result<FieldImage, FormatError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        decode_field(&bytes)
    }
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PgmCursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize, FormatError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::BadPgm {
                offset: start,
                reason: "expected a decimal number".into(),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<FieldImage, FormatError> {
    if !bytes.starts_with(b"P5") {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    let mut cur = PgmCursor { bytes, pos: 2 };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval_at = cur.pos;
    let maxval = cur.number()?;
    if width == 0 || height == 0 {
        return Err(FormatError::ZeroDimension { offset: 2 });
    }
    if !(1..=65535).contains(&maxval) {
        return Err(FormatError::BadPgm {
            offset: maxval_at,
            reason: format!("maxval {maxval} outside 1..=65535"),
        });
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(FormatError::BadPgm {
            offset: cur.pos,
            reason: "missing whitespace before raster".into(),
        });
    }
    let start = cur.pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let expected = width
        .checked_mul(height)
        .and_then(|x| x.checked_mul(bps))
        .and_then(|x| x.checked_add(start))
        .ok_or(FormatError::DimensionOverflow { offset: 2 })?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            expected,
            found: bytes.len(),
        });
    }
    let raster = &bytes[start..expected];
    let scale = maxval as f32;
    let data: Vec<f32> = if bps == 1 {
        raster.iter().map(|&b| f32::from(b) / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    Ok(FieldImage::new(height, width, 1, data)?)
}

pub fn encode_pgm(shape: Shape, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes the first channel of `field`, clamped to `[0, 1]`, as 8-bit PGM.
pub fn write_pgm(field: &FieldImage, path: &Path) -> Result<(), FormatError> {
    let pixels: Vec<u8> = (0..field.len())
        .map(|i| (field.vector(i)[0].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_atomic(path, &encode_pgm(field.shape(), &pixels))?;
    Ok(())
}

/// Min-max scales `values` to 0..=255; a constant map becomes mid-grey 128.
pub fn heatmap_pixels(values: &[f64]) -> Result<Vec<u8>, FormatError> {
    if values.is_empty() {
        return Err(FormatError::Empty);
    }
    if let Some(t) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite { offset: t });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![128; values.len()]);
    }
    Ok(values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect())
}

pub fn export_heatmap(values: &[f64], shape: Shape, path: &Path) -> Result<(), FormatError> {
    if values.len() != shape.len() {
        return Err(crate::error::ScramError::DimensionMismatch {
            expected: shape.len(),
            found: values.len(),
        }
        .into());
    }
    write_atomic(path, &encode_pgm(shape, &heatmap_pixels(values)?))?;
    Ok(())
}

/// Packs top-kappa fields into one raster of depth `2 * kappa` holding
/// `(y, x)` per rank; unmatched entries are `(-1, -1)`.
pub fn fields_to_raster(fields: &[NeighbourField]) -> Result<FieldImage, FormatError> {
    let first = fields.first().ok_or(FormatError::Empty)?;
    let shape = first.shape();
    let depth = 2 * fields.len();
    let mut data = Vec::with_capacity(shape.len() * depth);
    for i in 0..shape.len() {
        for f in fields {
            match f.get(i) {
                Some(p) => data.extend([p.y as f32, p.x as f32]),
                None => data.extend([-1.0, -1.0]),
            }
        }
    }
    Ok(FieldImage::new(shape.height, shape.width, depth, data)?)
}

pub fn raster_to_fields(raster: &FieldImage, key_shape: Shape) -> Result<Vec<NeighbourField>, FormatError> {
    if !raster.depth().is_multiple_of(2) {
        return Err(FormatError::BadPgm {
            offset: 16,
            reason: "neighbour raster depth must be even".into(),
        });
    }
    (0..raster.depth() / 2)
        .map(|r| {
            let entries = (0..raster.len())
                .map(|i| {
                    let v = raster.vector(i);
                    let (y, x) = (v[2 * r], v[2 * r + 1]);
                    (y >= 0.0 && x >= 0.0).then(|| PixelIndex::new(y as usize, x as usize))
                })
                .collect();
            Ok(NeighbourField::new(raster.shape(), key_shape, entries)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::uniform_field;
    use proptest::prelude::*;

    #[test]
    fn zero_field_payload() {
        let f = FieldImage::zeros(2, 2, 1).unwrap();
        let bytes = encode_field(&f);
        assert_eq!(bytes.len(), HEADER_LEN + 16);
        assert!(bytes[HEADER_LEN..].iter().all(|&b| b == 0));
        assert_eq!(&bytes[..5], b"SCRF1");
    }

    #[test]
    fn header_errors_carry_offsets() {
        let mut bytes = encode_field(&uniform_field(2, 3, 2, 1));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_field(&bad), Err(FormatError::BadMagic { offset: 0 })));
        bad = bytes.clone();
        bad[5] = b'd';
        assert!(matches!(decode_field(&bad), Err(FormatError::UnsupportedDtype { offset: 5, .. })));
        bad = bytes.clone();
        bad[6] = b'>';
        assert!(matches!(decode_field(&bad), Err(FormatError::UnsupportedEndianness { offset: 6, .. })));
        bad = bytes.clone();
        bad[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_field(&bad), Err(FormatError::ZeroDimension { offset: 12 })));
        bad = bytes.clone();
        bad.truncate(bad.len() - 3);
        assert!(matches!(decode_field(&bad), Err(FormatError::Truncated { .. })));
        bad = bytes.clone();
        for o in [8, 12, 16] {
            bad[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode_field(&bad),
            Err(FormatError::DimensionOverflow { .. }) | Err(FormatError::Truncated { .. })
        ));
        bytes.push(0);
        assert!(matches!(decode_field(&bytes), Err(FormatError::TrailingBytes { .. })));
        let mut nan = encode_field(&FieldImage::zeros(1, 1, 1).unwrap());
        nan[HEADER_LEN..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_field(&nan), Err(FormatError::NonFinite { offset: HEADER_LEN })));
    }

    #[test]
    fn pgm_white_square() {
        let bytes = encode_pgm(Shape::new(3, 3), &[255; 9]);
        let f = decode_pgm(&bytes).unwrap();
        assert_eq!((f.height(), f.width(), f.depth()), (3, 3, 1));
        assert!(f.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend([0u8, 51]);
        let f = decode_pgm(&bytes).unwrap();
        assert_eq!(f.data(), &[0.0, 0.2]);
        assert!(decode_pgm(b"P5\n2 1\n255\n\x00").is_err());
    }

    #[test]
    fn heatmap_rules() {
        assert_eq!(heatmap_pixels(&[0.3; 6]).unwrap(), vec![128; 6]);
        let mut onehot = vec![0.0; 5];
        onehot[2] = 0.7;
        assert_eq!(heatmap_pixels(&onehot).unwrap(), vec![0, 0, 255, 0, 0]);
        assert!(matches!(heatmap_pixels(&[]), Err(FormatError::Empty)));
    }

    #[test]
    fn neighbour_raster_round_trip() {
        let s = Shape::new(2, 3);
        let f = NeighbourField::new(
            s,
            s,
            vec![None, Some(PixelIndex::new(0, 0)), Some(PixelIndex::new(1, 2)), None, Some(PixelIndex::new(0, 1)), Some(PixelIndex::new(1, 1))],
        )
        .unwrap();
        let raster = fields_to_raster(&[f.clone(), f.clone()]).unwrap();
        assert_eq!(raster.depth(), 4);
        assert_eq!(raster_to_fields(&raster, s).unwrap(), vec![f.clone(), f]);
    }

    proptest! {
        #[test]
        fn scrf_round_trip_is_bitwise(h in 1usize..6, w in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
            let f = uniform_field(h, w, d, seed);
            let bytes = encode_field(&f);
            let back = decode_field(&bytes).unwrap();
            prop_assert_eq!(encode_field(&back), bytes);
            prop_assert_eq!(back, f);
        }

        #[test]
        fn pgm_round_trip_is_exact(h in 1usize..6, w in 1usize..6, px in proptest::collection::vec(any::<u8>(), 36)) {
            let s = Shape::new(h, w);
            let bytes = encode_pgm(s, &px[..h * w]);
            let field = decode_pgm(&bytes).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.pgm");
            write_pgm(&field, &path).unwrap();
            prop_assert_eq!(std::fs::read(&path).unwrap(), bytes);
        }
    }
}
