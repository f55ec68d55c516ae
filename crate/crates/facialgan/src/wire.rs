//! PNG and base64 encodings shared by the dataset reader, the CLI and the
//! HTTP API.
//!
//! Masks are 8-bit indexed PNGs whose pixel values are class ids. The
//! palette only affects how viewers display them; decoders read the indices
//! and also accept 8-bit grayscale.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use facialgan_core::datapipe::{raw, Image, SegMask, NUM_CLASSES};
use image::imageops::FilterType;

use crate::error::{Error, Result};

/// Display colours of the working classes.
pub const CLASS_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0x00, 0x00, 0x00],
    [0xcc, 0x88, 0x66],
    [0x00, 0xcc, 0x00],
    [0x00, 0x66, 0xff],
    [0xcc, 0x00, 0x00],
];

/// Display colours of the raw dataset labels.
pub const RAW_PALETTE: [[u8; 3]; raw::NUM_RAW] = [
    [0, 0, 0],
    [204, 136, 102],
    [0, 102, 255],
    [255, 255, 0],
    [0, 204, 0],
    [0, 153, 0],
    [102, 204, 0],
    [51, 153, 0],
    [204, 0, 204],
    [153, 0, 153],
    [204, 0, 0],
    [255, 51, 51],
    [153, 0, 0],
    [102, 51, 0],
    [255, 153, 0],
    [0, 255, 255],
    [0, 153, 153],
    [255, 204, 153],
    [128, 128, 128],
];

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| Error::Decode(format!("invalid base64: {e}")))
}

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::Decode(format!("png: {e}"))
}

/// Interleaved 8-bit RGB of any PNG colour type.
pub fn decode_rgb8(bytes: &[u8]) -> Result<image::RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(png_error)?;
    Ok(img.to_rgb8())
}

/// Bilinear resize to `size x size` when needed.
pub fn resize_rgb8(img: image::RgbImage, size: usize) -> image::RgbImage {
    if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

pub fn rgb8_to_image(img: &image::RgbImage) -> Result<Image> {
    Ok(Image::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())?)
}

/// Decode a PNG into an image, resized to `size` when given.
pub fn decode_image(bytes: &[u8], size: Option<usize>) -> Result<Image> {
    let mut img = decode_rgb8(bytes)?;
    if let Some(s) = size {
        img = resize_rgb8(img, s);
    }
    rgb8_to_image(&img)
}

/// 8-bit RGB PNG.
pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    encode_png(
        img.width(),
        img.height(),
        png::ColorType::Rgb,
        None,
        &img.to_rgb8(),
    )
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().map_err(png_error)?;
        writer.write_image_data(data).map_err(png_error)?;
    }
    Ok(out)
}

/// Indexed PNG whose pixel values are `labels`.
pub fn encode_indexed(width: usize, height: usize, labels: &[u8], palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();
    encode_png(width, height, png::ColorType::Indexed, Some(flat), labels)
}

/// Pixel indices of an 8-bit indexed or grayscale PNG: `(height, width, values)`.
pub fn decode_indexed(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(png_error)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::BadMask(format!("mask bit depth {:?}, expected 8", info.bit_depth)));
    }
    match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => {
            return Err(Error::BadMask(format!(
                "mask colour type {other:?}, expected indexed or grayscale"
            )))
        }
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

/// Working-class mask as an indexed PNG with values 0..4.
pub fn encode_mask(mask: &SegMask) -> Result<Vec<u8>> {
    encode_indexed(mask.width(), mask.height(), mask.labels(), &CLASS_PALETTE)
}

/// Working-class mask from an indexed PNG, resized (nearest) to `size`.
pub fn decode_mask(bytes: &[u8], size: Option<usize>) -> Result<SegMask> {
    let (h, w, mut labels) = decode_indexed(bytes)?;
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
        return Err(Error::BadMask(format!("class value {bad} outside 0..{NUM_CLASSES}")));
    }
    let (mut oh, mut ow) = (h, w);
    if let Some(s) = size {
        if (h, w) != (s, s) {
            labels = facialgan_core::datapipe::resize_nearest(&labels, (h, w), (s, s));
            oh = s;
            ow = s;
        }
    }
    SegMask::from_labels(oh, ow, labels).map_err(|e| Error::BadMask(e.to_string()))
}
