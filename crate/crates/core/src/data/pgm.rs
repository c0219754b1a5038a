//! Binary greyscale PGM (P5, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit greyscale grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidShape(vec![height, width]));
        }
        if pixels.len() != width * height {
            return Err(Error::ElementCount {
                from: vec![pixels.len()],
                to: vec![height, width],
            });
        }
        Ok(Gray { width, height, pixels })
    }
}

pub fn encode_pgm(grid: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend_from_slice(&grid.pixels);
    out
}

/// Parses a P5 file; `label` names the source in errors.
pub fn decode_pgm(bytes: &[u8], label: &str) -> Result<Gray> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::UnsupportedFormat(label.to_string()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated(label.to_string())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(label.to_string()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(label.to_string()))?;
    }
    // Exactly one whitespace byte separates maxval from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::MalformedHeader(label.to_string())),
        None => return Err(Error::Truncated(label.to_string())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(label.to_string(), maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(label.to_string()));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::MalformedHeader(label.to_string()))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::Truncated(label.to_string()));
    }
    Gray::new(width, height, payload[..n].to_vec())
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

pub fn write_pgm(grid: &Gray, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(grid)).map_err(|e| Error::io(path, e))
}
