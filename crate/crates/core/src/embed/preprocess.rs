use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_plane, rgb_planes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bicubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    Center,
}

/// Input contract of an image encoder: resize, crop and per-channel standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_side: u32,
    pub interpolation: Interpolation,
    pub crop: Crop,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

impl PreprocessSpec {
    /// The reference CLIP configuration (224 px, OpenAI channel statistics).
    pub fn clip() -> Self {
        PreprocessSpec {
            target_side: 224,
            interpolation: Interpolation::Bicubic,
            crop: Crop::Center,
            channel_means: [0.48145466, 0.4578275, 0.40821073],
            channel_stds: [0.26862954, 0.26130258, 0.27577711],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_side == 0 {
            return Err(Error::Config("target_side must be positive".into()));
        }
        if self.channel_stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("channel_stds must be strictly positive".into()));
        }
        if self.channel_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("channel_means must be finite".into()));
        }
        Ok(())
    }

    /// Size after resizing the shorter side to `target_side`.
    pub fn resized_dims(&self, width: u32, height: u32) -> (u32, u32) {
        let side = self.target_side as f64;
        if width <= height {
            (self.target_side, (height as f64 * side / width as f64).round() as u32)
        } else {
            ((width as f64 * side / height as f64).round() as u32, self.target_side)
        }
    }
}

/// Channel-major `3 x side x side` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTensor {
    pub side: usize,
    pub data: Vec<f32>,
}

impl PixelTensor {
    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.side + y) * self.side + x]
    }
}

/// Decodes an encoded image to RGB: grayscale is replicated, alpha dropped.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)?;
    to_rgb(img)
}

pub fn to_rgb(img: DynamicImage) -> Result<RgbImage> {
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgba8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => Ok(img.to_rgb8()),
        other => Err(Error::Image(format!("no RGB conversion defined for {:?}", other.color()))),
    }
}

/// Resizes the shorter side to the target, center-crops a square and
/// standardizes each channel.
pub fn preprocess(image: &RgbImage, spec: &PreprocessSpec) -> Result<PixelTensor> {
    spec.validate()?;
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("zero-dimension image {w}x{h}")));
    }
    let (rw, rh) = spec.resized_dims(w, h);
    let side = spec.target_side as usize;
    let left = (rw as usize - side) / 2;
    let top = (rh as usize - side) / 2;
    let mut data = Vec::with_capacity(3 * side * side);
    for (c, plane) in rgb_planes(image).iter().enumerate() {
        let resized = resize_plane(plane, w as usize, h as usize, rw as usize, rh as usize);
        let (mean, std) = (spec.channel_means[c], spec.channel_stds[c]);
        for y in top..top + side {
            let row = &resized[y * rw as usize + left..y * rw as usize + left + side];
            data.extend(row.iter().map(|v| ((v - mean) / std) as f32));
        }
    }
    Ok(PixelTensor { side, data })
}
