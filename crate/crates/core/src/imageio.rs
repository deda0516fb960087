//! Binary PPM (P6) and PGM (P5) with 8-bit samples, value = round(255·v).

use std::path::Path;

use crate::error::{Error, Result};
use crate::representations::Image;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {}", img.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let n = img.height * img.width;
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(img.data[c * n + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(width: usize, height: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!("PGM {width}x{height} with {} values", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    Ok(out)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated image header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("bad header".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field {s}")));
    let (w, h, maxv) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxv != 255 {
        return Err(Error::Format(format!("only 8-bit images are supported (maxval {maxv})")));
    }
    Ok((w, h, bytes.get(pos..).unwrap_or(&[])))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, raster) = parse_header(bytes, "P6")?;
    let n = w * h;
    if raster.len() != 3 * n {
        return Err(Error::Format(format!("PPM raster has {} bytes, expected {}", raster.len(), 3 * n)));
    }
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = raster[3 * i + c] as f32 / 255.0;
        }
    }
    Image::new(3, h, w, data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, raster) = parse_header(bytes, "P5")?;
    if raster.len() != w * h {
        return Err(Error::Format("PGM raster size mismatch".into()));
    }
    Ok((w, h, raster.to_vec()))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, values)?)?;
    Ok(())
}
