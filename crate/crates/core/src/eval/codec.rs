//! PNG encoding of color (8-bit RGB) and depth (16-bit, 1/5000 m) images.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geom::Vec3;
use crate::image::{ColorImage, DepthImage, Image};

use super::DEPTH_SCALE;

fn dataset_err(path: &Path, reason: impl ToString) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn color_to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn depth_to_u16(d: f64) -> u16 {
    if d > 0.0 && d.is_finite() {
        (d * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16
    } else {
        0
    }
}

/// Rounds a frame's images to the precision of the PNG encoding.
pub fn quantize(frame: &Frame) -> Frame {
    let mut f = frame.clone();
    for c in &mut f.color.data {
        *c = c.map(|v| color_to_u8(v) as f64 / 255.0);
    }
    for d in &mut f.depth.data {
        *d = depth_to_u16(*d) as f64 / DEPTH_SCALE;
    }
    f
}

pub fn write_color(path: &Path, img: &ColorImage) -> Result<()> {
    let buf: RgbImage = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let c = img.at(x as usize, y as usize);
        Rgb([color_to_u8(c.x), color_to_u8(c.y), color_to_u8(c.z)])
    });
    buf.save(path)?;
    Ok(())
}

pub fn write_depth(path: &Path, img: &DepthImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        Luma([depth_to_u16(*img.at(x as usize, y as usize))])
    });
    buf.save(path)?;
    Ok(())
}

/// Depth rendered as an 8-bit gray image scaled to `max_depth`.
pub fn write_depth_preview(path: &Path, img: &DepthImage, max_depth: f64) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let d = *img.at(x as usize, y as usize);
        Luma([color_to_u8(if max_depth > 0.0 { d / max_depth } else { 0.0 })])
    });
    buf.save(path)?;
    Ok(())
}

pub fn read_color(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|e| dataset_err(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| Vec3::new(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
        .collect();
    Image::from_vec(w, h, data)
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let img = image::open(path).map_err(|e| dataset_err(path, e))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f64 / DEPTH_SCALE).collect();
    Image::from_vec(w, h, data)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| dataset_err(path, e))
}

pub(crate) fn invalid(path: &Path, reason: impl ToString) -> Error {
    dataset_err(path, reason)
}
