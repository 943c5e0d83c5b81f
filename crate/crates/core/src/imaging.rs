//! Decoding of the builtin raster formats (PNG, PGM, PPM) to 8-bit grayscale.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};

/// Format of an accepted raster file, used as its stored extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterFormat {
    Png,
    Pgm,
    Ppm,
}

impl RasterFormat {
    pub fn extension(self) -> &'static str {
        match self {
            RasterFormat::Png => "png",
            RasterFormat::Pgm => "pgm",
            RasterFormat::Ppm => "ppm",
        }
    }

    /// Sniffs the format from the leading bytes. PBM and PAM are not accepted.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            return Some(RasterFormat::Png);
        }
        match bytes.get(..2) {
            Some(b"P2") | Some(b"P5") => Some(RasterFormat::Pgm),
            Some(b"P3") | Some(b"P6") => Some(RasterFormat::Ppm),
            _ => None,
        }
    }
}

/// Decodes an accepted raster and converts it to luma.
pub fn decode_gray(bytes: &[u8]) -> Result<(RasterFormat, GrayImage)> {
    let format = RasterFormat::sniff(bytes)
        .ok_or_else(|| Error::UndecodableImage("unsupported image format".into()))?;
    let image_format = match format {
        RasterFormat::Png => ImageFormat::Png,
        RasterFormat::Pgm | RasterFormat::Ppm => ImageFormat::Pnm,
    };
    let decoded = image::load(Cursor::new(bytes), image_format)
        .map_err(|e| Error::UndecodableImage(e.to_string()))?;
    Ok((format, to_luma(decoded)))
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray(&bytes).map(|(_, img)| img)
}

/// Luma = round(0.299 R + 0.587 G + 0.114 B). Gray inputs pass through unchanged.
pub fn to_luma(image: DynamicImage) -> GrayImage {
    match image {
        DynamicImage::ImageLuma8(gray) => gray,
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            image.to_luma8()
        }
        other => {
            let rgb = other.to_rgb8();
            let mut out = GrayImage::new(rgb.width(), rgb.height());
            for (dst, src) in out.pixels_mut().zip(rgb.pixels()) {
                let [r, g, b] = src.0;
                let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                *dst = Luma([y.round().clamp(0.0, 255.0) as u8]);
            }
            out
        }
    }
}

pub fn encode_png(image: &GrayImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .expect("png encoding into memory cannot fail");
    out.into_inner()
}

pub fn crop(image: &GrayImage, x: u32, y: u32, w: u32, h: u32) -> GrayImage {
    image::imageops::crop_imm(image, x, y, w, h).to_image()
}
