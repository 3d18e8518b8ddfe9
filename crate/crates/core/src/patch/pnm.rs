//! Binary PGM (`P5`) and PPM (`P6`) images.

use std::fs;
use std::path::Path;

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let fail = |offset: usize, reason: &str| Error::format(path, offset as u64, reason);
    if bytes.len() < 2 {
        return Err(fail(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(fail(0, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
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
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "expected a decimal number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected whitespace after header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fail(pos, "maxval must be in 1..=65535"));
    }
    Ok(Header {
        channels,
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos + 1,
    })
}

/// Decodes a `P5`/`P6` image to `[H, W, C]` values in `[0, 1]`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(bytes, path)?;
    let wide = h.maxval > 255;
    let bpv = if wide { 2 } else { 1 };
    let n = h.width * h.height * h.channels;
    let body = &bytes[h.data_offset..];
    if body.len() < n * bpv {
        return Err(Error::format(
            path,
            (h.data_offset + body.len()) as u64,
            format!("pixel data truncated: expected {} bytes", n * bpv),
        ));
    }
    let max = h.maxval as f64;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = if wide {
            u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as u32
        } else {
            body[i] as u32
        };
        if v > h.maxval {
            return Err(Error::format(
                path,
                (h.data_offset + i * bpv) as u64,
                format!("sample {v} exceeds maxval {}", h.maxval),
            ));
        }
        data.push(v as f64 / max);
    }
    Tensor::new(vec![h.height, h.width, h.channels], data)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Quantizes a value in `[0, 1]` to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[H, W, 1]` as `P5` or `[H, W, 3]` as `P6` with maxval 255.
pub fn encode(pixels: &Tensor) -> Result<Vec<u8>> {
    let magic = match pixels.shape() {
        [_, _, 1] => "P5",
        [_, _, 3] => "P6",
        s => return Err(Error::shape(format!("cannot write {s:?} as PGM/PPM"))),
    };
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write(path: &Path, pixels: &Tensor) -> Result<()> {
    fs::write(path, encode(pixels)?).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path, label: Option<u32>) -> Result<ImageRecord> {
    ImageRecord::new(read(path)?, label)
}
