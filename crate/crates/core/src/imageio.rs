//! Binary PGM (`P5`) and PPM (`P6`) images with a fixed maxval of 255.
//!
//! Tensors use channel-major layout `[channels, height, width]` with one
//! channel for grayscale and three for color; pixel values live in
//! `[0, 1]`. Writing quantizes with `round(clamp(v, 0, 1) * 255)`, reading
//! maps bytes back as `byte / 255`. Quantization is idempotent: encoding a
//! decoded image reproduces the same bytes, which is what makes image
//! round-trips byte-stable.

use std::path::Path;

use crate::container::write_bytes_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_error(msg: impl Into<String>) -> Error {
    Error::ImageFormat(msg.into())
}

/// Serializes a `[c, h, w]` image tensor (`c` of 1 or 3) to PGM or PPM.
pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "image tensors are [channels, height, width], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c != 1 && c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "images need 1 or 3 channels, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = t.data();
    for pixel in 0..plane {
        for ch in 0..c {
            let v = data[ch * plane + pixel].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Parses a binary PGM or PPM image into a `[c, h, w]` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let magic = next_header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        other => {
            return Err(format_error(format!(
                "unsupported image magic {other:?}, expected P5 or P6"
            )))
        }
    };
    let w = parse_header_number(bytes, &mut pos, "width")?;
    let h = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format_error(format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(format_error("image dimensions must be positive"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_error("missing whitespace before pixel data")),
    }
    let plane = h
        .checked_mul(w)
        .ok_or_else(|| format_error("image dimensions overflow"))?;
    let expected = plane
        .checked_mul(channels)
        .ok_or_else(|| format_error("image dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(format_error(format!(
            "pixel data truncated: expected {expected} bytes, found {}",
            data.len()
        )));
    }
    if data.len() > expected {
        return Err(format_error(format!(
            "{} trailing bytes after pixel data",
            data.len() - expected
        )));
    }
    let mut values = vec![0.0f64; expected];
    for pixel in 0..plane {
        for ch in 0..channels {
            values[ch * plane + pixel] = data[pixel * channels + ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_raw(vec![channels, h, w], values))
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_error("unexpected end of image header"));
    }
    String::from_utf8(bytes[start..*pos].to_vec())
        .map_err(|_| format_error("image header is not ASCII"))
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let token = next_header_token(bytes, pos)?;
    token
        .parse::<usize>()
        .map_err(|_| format_error(format!("invalid {what} {token:?}")))
}

/// Writes an image atomically, via a sibling temporary file.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes_atomic(path, &encode_image(t)?)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}
