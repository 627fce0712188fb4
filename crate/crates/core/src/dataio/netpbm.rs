//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first payload byte.
    data_start: usize,
}

fn bad(offset: usize, reason: impl Into<String>) -> Error {
    Error::Image {
        offset,
        reason: reason.into(),
    }
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
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
    pos
}

fn read_uint(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(if start >= bytes.len() {
            bad(start, format!("header ends before {what}"))
        } else {
            bad(start, format!("expected {what}, found byte {:#04x}", bytes[start]))
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(start, format!("{what} out of range")))
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(bad(0, "file too short for a netpbm header"));
    }
    if &bytes[..2] != magic {
        return Err(bad(
            0,
            format!(
                "expected magic {}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&bytes[..2])
            ),
        ));
    }
    let mut pos = 2;
    let width = read_uint(bytes, &mut pos, "width")?;
    let height = read_uint(bytes, &mut pos, "height")?;
    let maxval_at = skip_space_and_comments(bytes, pos);
    let maxval = read_uint(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(2, format!("zero image dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(bad(maxval_at, format!("unsupported maxval {maxval} (only 255 is accepted)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        Some(_) => return Err(bad(pos, "expected a single whitespace byte after maxval")),
        None => return Err(bad(pos, "header ends before pixel data")),
    }
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let len = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| bad(h.data_start, "image dimensions overflow"))?;
    let end = h.data_start + len;
    if bytes.len() < end {
        return Err(bad(
            bytes.len(),
            format!("truncated payload: {} of {len} bytes present", bytes.len() - h.data_start),
        ));
    }
    Ok(&bytes[h.data_start..end])
}

/// P6 bytes to a `(1, 3, H, W)` tensor with values `p / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let px = payload(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = rgb[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec((1, 3, h.height, h.width), data)
}

/// Values are clamped to `[0, 1]` and rounded to the nearest 8-bit level.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!("PPM needs a (1, 3, H, W) tensor, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// P5 bytes to raw 8-bit samples.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes, b"P5")?;
    let px = payload(bytes, &h, 1)?;
    Mask::new(h.height, h.width, px.to_vec())
}

pub fn encode_pgm(gray: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", gray.w, gray.h).into_bytes();
    out.extend_from_slice(&gray.data);
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Binary mask from a P5 file: 0 is class 0; 1 or 255 is class 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let bytes = std::fs::read(path)?;
    let start = parse_header(&bytes, b"P5")?.data_start;
    let raw = decode_pgm(&bytes)?;
    let mut data = Vec::with_capacity(raw.data.len());
    for (i, &v) in raw.data.iter().enumerate() {
        data.push(match v {
            0 => 0,
            1 | 255 => 1,
            other => return Err(bad(start + i, format!("mask value {other} is neither 0 nor 255"))),
        });
    }
    Mask::new(raw.h, raw.w, data)
}

/// Writes 0 for class 0 and 255 for anything else.
pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let scaled = Mask {
        h: mask.h,
        w: mask.w,
        data: mask.data.iter().map(|&v| if v == 0 { 0 } else { 255 }).collect(),
    };
    std::fs::write(path, encode_pgm(&scaled))?;
    Ok(())
}

/// Raw 8-bit P5 samples, for id masks.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Mask> {
    decode_pgm(&std::fs::read(path)?)
}
