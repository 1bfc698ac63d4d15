//! Binary 8-bit PPM (P6) and PGM (P5).

use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::ImageFormat("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::ImageFormat(format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::ImageFormat(format!("bad header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("maxval {maxval}, only 255 supported")));
    }
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::ImageFormat("truncated raster".into()))?;
    Image::new(
        height,
        width,
        channels,
        raster.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}
