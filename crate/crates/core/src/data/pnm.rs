//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{ImageTensor, LabelMap};

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, width: usize, height: usize, body: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(body);
    out
}

pub fn encode_ppm(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::dim(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut body = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                body.push(quantize(img.get(c, y, x)));
            }
        }
    }
    Ok(encode("P6", w, h, &body))
}

pub fn encode_pgm(label: &LabelMap) -> Vec<u8> {
    encode("P5", label.width(), label.height(), label.data())
}

/// Parses the header and returns `(width, height, body)`.
fn decode<'a>(bytes: &'a [u8], magic: &[u8], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |why: &str| Error::decode(path, why);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(&format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    Ok((width, height, &bytes[pos..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let (w, h, body) = decode(bytes, b"P6", path)?;
    if body.len() != 3 * w * h {
        return Err(Error::decode(path, format!("expected {} pixel bytes, found {}", 3 * w * h, body.len())));
    }
    let mut img = ImageTensor::filled(3, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(c, y, x, body[3 * (y * w + x) + c] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (w, h, body) = decode(bytes, b"P5", path)?;
    if body.len() != w * h {
        return Err(Error::decode(path, format!("expected {} pixel bytes, found {}", w * h, body.len())));
    }
    LabelMap::new(h, w, body.to_vec())
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, label: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(label)).map_err(|e| Error::io(path, e))
}
