//! Portable Float Map I/O.
//!
//! Header: `Pf` (1 channel) or `PF` (3 channels), then `width height`, then
//! a scale whose sign gives the byte order (negative = little-endian). Pixel
//! rows follow bottom-to-top as packed float32.

use std::path::Path;

use crate::raster::DepthMap;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Top-to-bottom, row-major, interleaved.
    pub data: Vec<f32>,
}

pub fn encode_pfm(img: &PfmImage) -> Vec<u8> {
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    out.reserve(4 * img.data.len());
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<PfmImage> {
    let err = |msg: String| Error::format(path, msg);
    let mut pos = 0;
    let mut next_line = |what: &str| -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(format!("PFM header truncated before {what}")))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| err(format!("PFM {what} is not ASCII")))?
            .trim()
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    let channels = match next_line("type")?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(err(format!("unknown PFM type {other:?}, expected \"Pf\" or \"PF\""))),
    };
    let dims = next_line("dimensions")?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) if w > 0 && h > 0 => (w, h),
        _ => return Err(err(format!("bad PFM dimensions line {dims:?}"))),
    };
    let scale_line = next_line("scale")?;
    let scale: f64 = scale_line
        .parse()
        .map_err(|_| err(format!("bad PFM scale {scale_line:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(err(format!("PFM scale {scale} does not encode a byte order")));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != 4 * n {
        return Err(err(format!(
            "PFM payload is {} bytes, expected {} for {width}x{height}x{channels} {}-endian float32",
            payload.len(),
            4 * n,
            if little { "little" } else { "big" }
        )));
    }
    let row = width * channels;
    let mut data = vec![0.0f32; n];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_pfm(path: &Path, img: &PfmImage) -> Result<()> {
    std::fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_pfm(
        path,
        &PfmImage {
            width: depth.width,
            height: depth.height,
            channels: 1,
            data: depth.data.clone(),
        },
    )
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let img = read_pfm(path)?;
    if img.channels != 1 {
        return Err(Error::format(path, "depth PFM must be single-channel (\"Pf\")"));
    }
    DepthMap::from_vec(img.width, img.height, img.data)
}
