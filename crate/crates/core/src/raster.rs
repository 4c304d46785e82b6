//! Binary greyscale PGM (P5) reading and writing.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Decode a P5 image into values normalized by its declared maximum.
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let raster_error = |reason: String| Error::Raster {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| raster_error(e.to_string()))?;
    decode_pgm(&bytes).map_err(raster_error)
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected binary PGM magic `P5`, found `{}`", fields[0]));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("invalid {what} `{s}`"))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let depth = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * depth;
    let data = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| format!("raster truncated: need {needed} bytes"))?;
    let scale = 1.0 / maxval as f64;
    let values = Array2::from_shape_fn((height, width), |(r, c)| {
        let i = (r * width + c) * depth;
        let v = if depth == 1 {
            data[i] as f64
        } else {
            u16::from_be_bytes([data[i], data[i + 1]]) as f64
        };
        (v * scale).min(1.0)
    });
    Ok(values)
}

/// Encode as a 16-bit P5 image, linearly mapping `[min, max]` to `[0, 65535]`.
/// Non-finite values map to 0; a constant image maps to all zeros.
pub fn encode_pgm16(values: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = values.dim();
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    out.reserve(rows * cols * 2);
    for &v in values.iter() {
        let q = if v.is_finite() && span > 0.0 {
            ((v - lo) / span * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_16_bit() {
        let a = Array2::from_shape_fn((3, 5), |(r, c)| (r * 5 + c) as f64);
        let decoded = decode_pgm(&encode_pgm16(&a)).unwrap();
        assert_eq!(decoded.dim(), (3, 5));
        for (x, y) in decoded.iter().zip(a.iter()) {
            assert!((x - y / 14.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eight_bit_with_comment() {
        let mut bytes = b"P5\n# mask\n2 2\n200\n".to_vec();
        bytes.extend_from_slice(&[0, 100, 200, 50]);
        let a = decode_pgm(&bytes).unwrap();
        assert_eq!(a[[0, 1]], 0.5);
        assert_eq!(a[[1, 0]], 1.0);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_pgm(b"P2\n2 2\n255\n0 0 0 0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2").is_err());
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
    }

    #[test]
    fn constant_image_encodes_to_zero() {
        let a = Array2::from_elem((2, 2), 3.0);
        let bytes = encode_pgm16(&a);
        assert!(bytes.ends_with(&[0u8; 8]));
    }
}
