//! Binary PPM (P6) image files: trivially parseable, zero dependencies.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size");
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{width} {height}\n255\n")?;
    file.write_all(rgb)?;
    Ok(())
}

fn is_ppm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

fn read_token<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a [u8]> {
    while *pos < bytes.len() && is_ppm_space(bytes[*pos]) {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !is_ppm_space(bytes[*pos]) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Data(format!("ppm: missing {what} in header")));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(token: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("ppm: malformed {what} in header")))
}

/// Decode an 8-bit P6 file into raw RGB bytes.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let magic = read_token(&bytes, &mut pos, "magic")?;
    if magic != b"P6" {
        return Err(Error::Data(format!(
            "ppm: bad magic in {} (want P6)",
            path.display()
        )));
    }
    let width = parse_usize(read_token(&bytes, &mut pos, "width")?, "width")?;
    let height = parse_usize(read_token(&bytes, &mut pos, "height")?, "height")?;
    let maxval = parse_usize(read_token(&bytes, &mut pos, "maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Data(format!("ppm: maxval {maxval} unsupported (want 255)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !is_ppm_space(bytes[pos]) {
        return Err(Error::Data("ppm: missing separator before payload".into()));
    }
    pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Data(format!(
            "ppm: truncated payload, expected {expected} bytes, got {}",
            payload.len()
        )));
    }
    Ok((width, height, payload[..expected].to_vec()))
}

/// Decode and standardize: bytes -> [0,1] -> (x - 0.5)/0.5. Output shape
/// is `[H, W, C]`, channel order RGB, row-major.
pub fn decode_image<S: Scalar>(path: &Path, expect: Option<(usize, usize)>) -> Result<Tensor<S>> {
    let (width, height, rgb) = read_ppm(path)?;
    if let Some((eh, ew)) = expect {
        if height != eh || width != ew {
            return Err(Error::Data(format!(
                "ppm: {} is {height}x{width}, configured geometry is {eh}x{ew}",
                path.display()
            )));
        }
    }
    let half = S::from_f64_lossy(0.5);
    let scale = S::from_f64_lossy(1.0 / 255.0);
    let data: Vec<S> = rgb
        .iter()
        .map(|b| (S::from_f64_lossy(*b as f64) * scale - half) / half)
        .collect();
    Tensor::from_vec(vec![height, width, 3], data)
}
