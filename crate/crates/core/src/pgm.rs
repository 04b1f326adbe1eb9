//! 8-bit binary PGM (`P5`) export.

use std::path::Path;

use crate::error::{RaaError, Result};
use crate::tensor::Tensor;

/// Encode an `[h×w]` map with values in `[0, 1]` as `P5`, maxval 255.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = *map.shape() else {
        return Err(RaaError::dim("encode_pgm", format!("expected [h, w], got {:?}", map.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

pub fn write_pgm(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

/// A decoded `P5` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Parse a `P5` file: magic, whitespace-separated width, height and maxval
/// (with `#` comments allowed), one whitespace byte, then the raster.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let fail = |offset: usize, reason: &str| RaaError::Format {
        offset: offset as u64,
        reason: reason.into(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fail(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(fail(2, "invalid dimensions or maxval for 8-bit P5"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected single whitespace before raster"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != width * height {
        return Err(fail(pos, "raster length does not match width*height"));
    }
    if raster.iter().any(|&p| p as usize > maxval) {
        return Err(fail(pos, "pixel exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: raster.to_vec(),
    })
}
