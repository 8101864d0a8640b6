//! PNG images as linear floats in [0, 1].
//!
//! Values are quantized with `round(x * (2^b - 1))` after clamping; no transfer
//! function is applied in either direction.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb, Rgba};
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode PNG: {message}")]
    Decode { path: String, message: String },
    #[error("unsupported colour type {0}; expected 8- or 16-bit RGB or RGBA")]
    UnsupportedColorType(String),
    #[error("cannot write an image with {0} channels")]
    UnsupportedChannels(usize),
    #[error("{path}: cannot encode PNG: {message}")]
    Encode { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn quantize(x: f64, max: f64) -> f64 {
    (x.clamp(0.0, 1.0) * max).round()
}

/// Loads an RGB or RGBA PNG into a 3- or 4-channel image.
pub fn load_png(path: &Path) -> Result<Image, PngError> {
    let bytes = std::fs::read(path).map_err(|source| PngError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes).map_err(|e| match e {
        PngError::Decode { message, .. } => PngError::Decode {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<Image, PngError> {
    // the decoder expands palettes silently, so check the header first
    if bytes.len() > 25 && bytes.starts_with(b"\x89PNG\r\n\x1a\n") && &bytes[12..16] == b"IHDR" && bytes[25] == 3 {
        return Err(PngError::UnsupportedColorType("indexed".into()));
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| PngError::Decode {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match &img {
        DynamicImage::ImageRgb8(b) => (3, b.as_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgba8(b) => (4, b.as_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect()),
        DynamicImage::ImageRgba16(b) => (4, b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect()),
        other => return Err(PngError::UnsupportedColorType(format!("{:?}", other.color()))),
    };
    Ok(Image::from_vec(w, h, channels, data).expect("decoded buffer size"))
}

/// Encodes a 1-, 3- or 4-channel image. Single-channel images are written as
/// grey RGB.
pub fn encode_png(image: &Image, depth: BitDepth) -> Result<Vec<u8>, PngError> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let expanded;
    let src = match image.channels() {
        1 => {
            expanded = Image::from_vec(
                image.width(),
                image.height(),
                3,
                image.data().iter().flat_map(|&v| [v, v, v]).collect(),
            )
            .unwrap();
            &expanded
        }
        3 | 4 => image,
        c => return Err(PngError::UnsupportedChannels(c)),
    };
    let dynamic = match (src.channels(), depth) {
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, src.data().iter().map(|&v| quantize(v, 255.0) as u8).collect())
                .unwrap(),
        ),
        (4, BitDepth::Eight) => DynamicImage::ImageRgba8(
            ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, src.data().iter().map(|&v| quantize(v, 255.0) as u8).collect())
                .unwrap(),
        ),
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(
                w,
                h,
                src.data().iter().map(|&v| quantize(v, 65535.0) as u16).collect(),
            )
            .unwrap(),
        ),
        (4, BitDepth::Sixteen) => DynamicImage::ImageRgba16(
            ImageBuffer::<Rgba<u16>, _>::from_raw(
                w,
                h,
                src.data().iter().map(|&v| quantize(v, 65535.0) as u16).collect(),
            )
            .unwrap(),
        ),
        _ => unreachable!(),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic.write_to(&mut out, ImageFormat::Png).map_err(|e| PngError::Encode {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(out.into_inner())
}

pub fn save_png(image: &Image, path: &Path, depth: BitDepth) -> Result<(), PngError> {
    let bytes = encode_png(image, depth).map_err(|e| match e {
        PngError::Encode { message, .. } => PngError::Encode {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })?;
    std::fs::write(path, bytes).map_err(|source| PngError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Combines a colour image and the rasterizer's alpha buffer into RGBA.
pub fn with_alpha(color: &Image, alpha: &Image) -> Option<Image> {
    if color.channels() != 3 || alpha.shape() != (color.width(), color.height(), 1) {
        return None;
    }
    let data = (0..color.pixel_count())
        .flat_map(|i| {
            let p = color.pixel(i);
            [p[0], p[1], p[2], alpha.data()[i]]
        })
        .collect();
    Image::from_vec(color.width(), color.height(), 4, data)
}
