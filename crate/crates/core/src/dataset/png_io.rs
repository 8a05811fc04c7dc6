use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::raster::{DepthMap, RgbImage};
use crate::{Error, Result};

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// 8-bit RGB with round-to-nearest quantization.
pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write_png(path, img.width, img.height, png::ColorType::Rgb, &bytes)
}

/// Grayscale depth visualization: `near` maps to white, `far` and invalid
/// pixels to black.
pub fn write_depth_vis(path: &Path, depth: &DepthMap, near: f64, far: f64) -> Result<()> {
    let bytes: Vec<u8> = depth
        .data
        .iter()
        .map(|&d| {
            if d > 0.0 {
                quantize((1.0 - (f64::from(d) - near) / (far - near)) as f32)
            } else {
                0
            }
        })
        .collect();
    write_png(path, depth.width, depth.height, png::ColorType::Grayscale, &bytes)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit PNG, got {:?}", info.bit_depth),
        ));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("expected RGB PNG, got {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..info.buffer_size()]
        .chunks_exact(stride)
        .flat_map(|px| px[..3].iter().map(|&b| f32::from(b) / 255.0))
        .collect();
    RgbImage::from_vec(w, h, data)
}
