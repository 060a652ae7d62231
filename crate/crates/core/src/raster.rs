//! 8-bit RGB PNG emission and full-precision image sidecars.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rawio::{self, format_shape};

/// Pixels between grid panels.
pub const GRID_GAP: usize = 2;

/// Interleaved 8-bit RGB of three bands, clamped to `[0, 1]`.
pub fn rgb_bytes(img: &Image, bands: [usize; 3]) -> Result<Vec<u8>> {
    if let Some(&b) = bands.iter().find(|&&b| b >= img.channels()) {
        return Err(Error::invalid(format!(
            "band {b} out of range for a {}-band image",
            img.channels()
        )));
    }
    let n = img.pixels();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        for &b in &bands {
            out.push((img.plane(b)[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Writes an RGB PNG; `text` entries become tEXt chunks.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8], text: &[(&str, &str)]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::invalid(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(png_err)?;
    }
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(rgb).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// One image as an RGB PNG.
pub fn write_rgb_png(path: &Path, img: &Image, bands: [usize; 3], text: &[(&str, &str)]) -> Result<()> {
    write_png(path, img.width(), img.height(), &rgb_bytes(img, bands)?, text)
}

/// Same-sized images side by side, separated by white gaps.
pub fn write_grid(path: &Path, panels: &[&Image], bands: [usize; 3], text: &[(&str, &str)]) -> Result<()> {
    let first = panels
        .first()
        .ok_or_else(|| Error::invalid("grid needs at least one panel"))?;
    let (h, w) = (first.height(), first.width());
    let total_w = panels.len() * w + (panels.len() - 1) * GRID_GAP;
    let mut canvas = vec![255u8; 3 * total_w * h];
    for (k, img) in panels.iter().enumerate() {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::invalid("grid panels must share a size"));
        }
        let rgb = rgb_bytes(img, bands)?;
        let x0 = k * (w + GRID_GAP);
        for y in 0..h {
            let dst = 3 * (y * total_w + x0);
            canvas[dst..dst + 3 * w].copy_from_slice(&rgb[3 * y * w..3 * (y + 1) * w]);
        }
    }
    write_png(path, total_w, h, &canvas, text)
}

/// Unclamped `f32` copy of an image (`<stem>.bin`) with a `<stem>.txt` header.
pub fn write_raw(dir: &Path, stem: &str, img: &Image, config_hash: &str) -> Result<()> {
    rawio::write_f32(&dir.join(format!("{stem}.bin")), img.data())?;
    rawio::write_text(
        &dir.join(format!("{stem}.txt")),
        &format!(
            "dtype=f32le\nshape={}\nconfig_hash={config_hash}\n",
            format_shape(&[img.channels(), img.height(), img.width()])
        ),
    )
}
