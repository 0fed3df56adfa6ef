//! Binary greyscale PGM ("P5", maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantize `[0,1]` pixels to bytes.
pub(crate) fn to_bytes(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub(crate) fn encode(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(to_bytes(pixels));
    out
}

/// Write a `[1×H×W]` (or `[H×W]`) tensor as a P5 file.
pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::dim("write_pgm", format!("expected a single-channel image, got {s:?}"))),
    };
    fs::write(path.as_ref(), encode(w, h, image.data())).map_err(|e| Error::io(path, e))
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM (magic {:?})", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    Ok((w, h, raster.iter().map(|&b| b as f32 / 255.0).collect()))
}

/// Read a P5 file into a `[1×H×W]` tensor with values in `[0,1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    let (w, h, pixels) = decode(&bytes)?;
    Tensor::new(&[1, h, w], pixels)
}
