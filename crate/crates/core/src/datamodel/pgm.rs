//! Binary PGM (P5) reading and writing.
//!
//! Images are stored with maxval 255, instance masks with maxval 65535
//! (big-endian 16-bit samples).

use std::fs;
use std::path::Path;

use super::{Image, InstanceMask};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Pgm {
    Image(Image),
    Mask(InstanceMask),
}

struct Header {
    w: usize,
    h: usize,
    maxval: u32,
    data_start: usize,
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && is_space(bytes[pos]) {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn parse_uint(bytes: &[u8], pos: usize, what: &str) -> Result<(u64, usize)> {
    let pos = skip_space_and_comments(bytes, pos);
    let start = pos;
    let mut end = pos;
    let mut value: u64 = 0;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((bytes[end] - b'0') as u64))
            .ok_or_else(|| Error::format(start, format!("{what} overflows")))?;
        end += 1;
    }
    if end == start {
        return Err(Error::format(start, format!("expected {what}")));
    }
    Ok((value, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "missing P5 magic"));
    }
    let (w, pos) = parse_uint(bytes, 2, "width")?;
    let (h, pos) = parse_uint(bytes, pos, "height")?;
    let (maxval, pos) = parse_uint(bytes, pos, "maxval")?;
    if pos >= bytes.len() || !is_space(bytes[pos]) {
        return Err(Error::format(pos, "expected whitespace after maxval"));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(2, format!("degenerate size {w}x{h}")));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::format(
            pos,
            format!("unsupported maxval {maxval} (expected 255 or 65535)"),
        ));
    }
    Ok(Header {
        w: w as usize,
        h: h as usize,
        maxval: maxval as u32,
        data_start: pos + 1,
    })
}

/// Decodes an in-memory P5 buffer.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let hd = parse_header(bytes)?;
    let n = hd
        .w
        .checked_mul(hd.h)
        .ok_or_else(|| Error::Capacity(format!("{}x{} pixels", hd.w, hd.h)))?;
    let bps = if hd.maxval == 255 { 1 } else { 2 };
    let expected = n * bps;
    let payload = &bytes[hd.data_start..];
    if payload.len() < expected {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated payload: expected {expected} bytes, got {}",
                payload.len()
            ),
        ));
    }
    if bps == 1 {
        let data = payload[..n]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect::<Vec<_>>();
        Ok(Pgm::Image(Image::new(hd.h, hd.w, data)?))
    } else {
        let raw = payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect();
        Ok(Pgm::Mask(InstanceMask::from_raw(hd.h, hd.w, raw)?))
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    match read_pgm(path.as_ref())? {
        Pgm::Image(img) => Ok(img),
        Pgm::Mask(_) => Err(Error::format(0, "expected an 8-bit image, found a 16-bit mask")),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<InstanceMask> {
    match read_pgm(path.as_ref())? {
        Pgm::Mask(m) => Ok(m),
        Pgm::Image(_) => Err(Error::format(0, "expected a 16-bit mask, found an 8-bit image")),
    }
}

/// Quantizes with round-half-up: `floor(v * 255 + 0.5)`.
pub fn quantize(v: f32) -> u8 {
    ((v as f64) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.w(), img.h()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_mask(mask: &InstanceMask) -> Result<Vec<u8>> {
    if mask.n_instances() > 65535 {
        return Err(Error::Capacity(format!(
            "{} instances exceed the 16-bit PGM range",
            mask.n_instances()
        )));
    }
    let mut out = format!("P5\n{} {}\n65535\n", mask.w(), mask.h()).into_bytes();
    for &l in mask.labels() {
        out.extend_from_slice(&(l as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(img)).map_err(|e| Error::io(path, e))
}

pub fn write_mask(mask: &InstanceMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_mask(mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
