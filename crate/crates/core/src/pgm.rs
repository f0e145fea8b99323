//! Binary PGM (P5) images, 8-bit and 16-bit.
//!
//! 16-bit samples are big-endian. Header comments (`#` to end of line) are
//! skipped on read and never written.

use std::fs;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl PgmImage {
    /// Samples narrowed to bytes; fails for images with maxval above 255.
    pub fn to_u8(&self) -> Option<Vec<u8>> {
        (self.maxval <= 255).then(|| self.samples.iter().map(|&v| v as u8).collect())
    }
}

pub fn encode8(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "pgm: buffer does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn encode16(width: usize, height: usize, data: &[u16]) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "pgm: buffer does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(data.len() * 2);
    data.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
    out
}

pub fn write8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_atomic(path, &encode8(width, height, data))
}

pub fn write16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    write_atomic(path, &encode16(width, height, data))
}

pub fn read(path: &Path) -> Result<PgmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

/// Reads an 8-bit image as `(width, height, data)`.
pub fn read8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = read(path)?;
    let data = img.to_u8().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: format!("expected an 8-bit image, maxval is {}", img.maxval),
    })?;
    Ok((img.width, img.height, data))
}

/// Reads an image of any depth as `(width, height, samples)`.
pub fn read16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = read(path)?;
    Ok((img.width, img.height, img.samples))
}

pub fn decode(bytes: &[u8]) -> Result<PgmImage, String> {
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P5") {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    pos += 2;
    let mut field = |name: &str| -> Result<usize, String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format!("header ends before {name}")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {name} in header"))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    pos += 1;
    let wide = maxval > 255;
    let count = width * height;
    let body = &bytes[pos..];
    let need = if wide { count * 2 } else { count };
    if body.len() != need {
        return Err(format!("expected {need} bytes of pixel data, found {}", body.len()));
    }
    let samples: Vec<u16> =
        if wide { body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect() } else { body.iter().map(|&b| b as u16).collect() };
    if let Some(v) = samples.iter().find(|&&v| v as usize > maxval) {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}
