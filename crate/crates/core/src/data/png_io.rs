//! Lossless PNG reading and writing for [`ImageBuf`].

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

use super::ImageBuf;

/// Read an 8-bit grayscale, RGB or RGBA PNG into a [0, 1] float image
/// (alpha is dropped).
pub fn read_png(path: &Path) -> Result<ImageBuf> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let (src_c, keep_c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported PNG color type {other:?}",
                path.display()
            )))
        }
    };
    let pixels = &buf[..h * w * src_c];
    let mut data = vec![0.0f64; keep_c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..keep_c {
                data[(ch * h + y) * w + x] = pixels[(y * w + x) * src_c + ch] as f64 / 255.0;
            }
        }
    }
    ImageBuf::new(keep_c, h, w, data)
}

/// Write a 1- or 3-channel [0, 1] float image as an 8-bit PNG.
pub fn write_png(path: &Path, img: &ImageBuf) -> Result<()> {
    let color = match img.c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::Data(format!(
                "PNG writer supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.w as u32, img.h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut pixels = vec![0u8; img.c * img.h * img.w];
    for y in 0..img.h {
        for x in 0..img.w {
            for ch in 0..img.c {
                let v = img.data[(ch * img.h + y) * img.w + x];
                pixels[(y * img.w + x) * img.c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    writer
        .write_image_data(&pixels)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}
