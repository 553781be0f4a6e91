use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Decoded {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

pub(crate) fn write_png(path: &Path, height: usize, width: usize, gray: bool, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if gray { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(pixels).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

/// Decodes any PNG to 8-bit gray, gray+alpha, RGB or RGBA samples.
pub(crate) fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| png_error(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_error(path, "unexpanded palette image")),
    };
    let (height, width) = (info.height as usize, info.width as usize);
    let mut pixels = Vec::with_capacity(height * width * channels);
    for row in buf.chunks(info.line_size).take(height) {
        pixels.extend_from_slice(&row[..width * channels]);
    }
    Ok(Decoded {
        height,
        width,
        channels,
        pixels,
    })
}
