//! Lossless PNG encoding of images, label maps and masks.
//!
//! RGB images are 8-bit and map linearly onto `[-1, 1]`; semantic maps and masks
//! are 8-bit single channel (masks use 0/255); instance maps are 16-bit.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::{byte_to_unit, unit_to_byte, Grid, HoleMask, InstanceMap, RgbImage, SemanticMap};

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Validation(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

fn decode(bytes: &[u8], field: &str) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::decode(field, format!("not a decodable PNG: {e}")))
}

pub fn encode_rgb(image: &RgbImage) -> Result<Vec<u8>> {
    let (h, w) = image.shape();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let px = image.pixel(y as usize, x as usize);
        Rgb([unit_to_byte(px[0]), unit_to_byte(px[1]), unit_to_byte(px[2])])
    });
    encode(DynamicImage::ImageRgb8(buf))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    decode_rgb_field(bytes, "image")
}

pub fn decode_rgb_field(bytes: &[u8], field: &str) -> Result<RgbImage> {
    let rgb = decode(bytes, field)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(RgbImage::from_fn(h, w, |r, c| {
        let p = rgb.get_pixel(c as u32, r as u32).0;
        [byte_to_unit(p[0]), byte_to_unit(p[1]), byte_to_unit(p[2])]
    }))
}

fn encode_luma8(grid: &Grid<u8>) -> Result<Vec<u8>> {
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(grid.width() as u32, grid.height() as u32, grid.data().to_vec())
        .expect("buffer size matches grid");
    encode(DynamicImage::ImageLuma8(buf))
}

fn decode_luma8(bytes: &[u8], field: &str) -> Result<Grid<u8>> {
    match decode(bytes, field)? {
        DynamicImage::ImageLuma8(buf) => {
            Grid::from_vec(buf.height() as usize, buf.width() as usize, buf.into_raw())
        }
        other => Err(Error::decode(
            field,
            format!("expected 8-bit single-channel PNG, got {:?}", other.color()),
        )),
    }
}

pub fn encode_semantic(map: &SemanticMap) -> Result<Vec<u8>> {
    if map.num_classes() > 256 {
        return Err(Error::argument("semantic", "8-bit storage supports at most 256 classes"));
    }
    encode_luma8(&map.labels().map(|v| v as u8))
}

/// Decodes a class-index PNG and checks every index against `num_classes`.
pub fn decode_semantic(bytes: &[u8], num_classes: usize, field: &str) -> Result<SemanticMap> {
    let grid = decode_luma8(bytes, field)?;
    SemanticMap::new(grid.map(|v| v as u16), num_classes).map_err(|e| match e {
        Error::Argument { message, .. } => Error::argument(field, message),
        other => other,
    })
}

pub fn encode_instances(map: &InstanceMap) -> Result<Vec<u8>> {
    if map.max_id() > u16::MAX as u32 {
        return Err(Error::argument("instances", "16-bit storage supports ids up to 65535"));
    }
    let data: Vec<u16> = map.data().iter().map(|&v| v as u16).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(map.width() as u32, map.height() as u32, data)
        .expect("buffer size matches grid");
    encode(DynamicImage::ImageLuma16(buf))
}

/// Decodes a 16-bit (or 8-bit) instance-id PNG. Ids are returned as stored.
pub fn decode_instances(bytes: &[u8], field: &str) -> Result<InstanceMap> {
    let grid = match decode(bytes, field)? {
        DynamicImage::ImageLuma16(buf) => Grid::from_vec(
            buf.height() as usize,
            buf.width() as usize,
            buf.into_raw().into_iter().map(u32::from).collect(),
        )?,
        DynamicImage::ImageLuma8(buf) => Grid::from_vec(
            buf.height() as usize,
            buf.width() as usize,
            buf.into_raw().into_iter().map(u32::from).collect(),
        )?,
        other => {
            return Err(Error::decode(
                field,
                format!("expected 16-bit single-channel PNG, got {:?}", other.color()),
            ))
        }
    };
    Ok(InstanceMap(grid))
}

pub fn encode_mask(mask: &HoleMask) -> Result<Vec<u8>> {
    encode_luma8(&mask.map(|v| if v == 1 { 255 } else { 0 }))
}

/// Decodes a 0/255 mask PNG; values ≥ 128 count as hole.
pub fn decode_mask(bytes: &[u8], field: &str) -> Result<HoleMask> {
    let grid = decode_luma8(bytes, field)?;
    Ok(HoleMask(grid.map(|v| u8::from(v >= 128))))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::load(path, e))
}
