//! Binary PGM (P5) images with 16-bit samples.
//!
//! Values outside `[0,1]` are stored as `(v − offset)/scale` and the affine
//! map is recorded in a `# craftlora offset=… scale=…` header comment.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

const MAXVAL: f64 = 65535.0;

pub fn encode(img: &ImageGrid) -> Vec<u8> {
    let (lo, hi) = img.pixels().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (offset, scale) = if img.is_empty() || (lo >= 0.0 && hi <= 1.0) {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi - lo)
    } else {
        (lo, 1.0)
    };
    let mut out = Vec::with_capacity(img.len() * 2 + 64);
    out.extend_from_slice(b"P5\n");
    if (offset, scale) != (0.0, 1.0) {
        writeln!(out, "# craftlora offset={offset:e} scale={scale:e}").expect("vec write");
    }
    writeln!(out, "{} {}\n65535", img.width(), img.height()).expect("vec write");
    for &v in img.pixels() {
        let q = (((v - offset) / scale).clamp(0.0, 1.0) * MAXVAL).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

fn bad(msg: &str) -> Error {
    Error::BadImage(msg.to_string())
}

pub fn decode(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    let (mut offset, mut scale) = (0.0, 1.0);
    while fields.len() < 3 {
        match bytes.get(pos) {
            None => return Err(bad("truncated PGM header")),
            Some(b'#') => {
                let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
                let line = std::str::from_utf8(&bytes[pos + 1..end]).map_err(|_| bad("non-UTF-8 comment"))?;
                for kv in line.split_whitespace() {
                    if let Some(v) = kv.strip_prefix("offset=") {
                        offset = v.parse().map_err(|_| bad("bad offset comment"))?;
                    } else if let Some(v) = kv.strip_prefix("scale=") {
                        scale = v.parse().map_err(|_| bad("bad scale comment"))?;
                    }
                }
                pos = end;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = pos;
                while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                    pos += 1;
                }
                let s = std::str::from_utf8(&bytes[start..pos]).expect("digits");
                fields.push(s.parse::<usize>().map_err(|_| bad("header number out of range"))?);
            }
            Some(_) => return Err(bad("unexpected byte in PGM header")),
        }
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    let depth = if maxval > 255 { 2 } else { 1 };
    let raster = &bytes[pos..];
    if raster.len() != width * height * depth {
        return Err(bad("raster size does not match the header"));
    }
    let m = maxval as f64;
    let pixels = raster
        .chunks(depth)
        .map(|c| {
            let q = if depth == 2 { u16::from_be_bytes([c[0], c[1]]) as f64 } else { c[0] as f64 };
            offset + scale * q / m
        })
        .collect();
    ImageGrid::new(height, width, pixels)
}

pub fn write(path: &Path, img: &ImageGrid) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ImageGrid> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let img = ImageGrid::from_fn(3, 5, |y, x| (y * 5 + x) as f64 / 14.0);
        let back = decode(&encode(&img)).unwrap();
        assert_eq!((back.height(), back.width()), (3, 5));
        assert!(back.max_abs_diff(&img) <= 0.5 / MAXVAL + 1e-12);
    }

    #[test]
    fn out_of_range_values_keep_their_affine_map() {
        let img = ImageGrid::new(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let bytes = encode(&img);
        assert!(String::from_utf8_lossy(&bytes).contains("# craftlora offset="));
        let back = decode(&bytes).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-4);
    }

    #[test]
    fn eight_bit_files_are_read() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let bytes = encode(&ImageGrid::filled(2, 2, 0.5));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::BadImage(_))));
    }
}
