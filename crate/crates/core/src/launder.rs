//! Post-processing used for robustness sweeps and reference-set augmentation.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::to_rgb;
use crate::error::{Error, Result};
use crate::raster::resize_rgb;

/// Smallest side any laundering step may produce.
pub const MIN_SIDE: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum LaunderStep {
    /// Square window of `fraction * min_side`, placed at a seeded random offset.
    Crop {
        fraction: f64,
    },
    /// Bicubic rescale of both sides.
    Resize {
        scale: f64,
    },
    Jpeg {
        quality: u8,
    },
    Webp {
        quality: u8,
    },
}

impl LaunderStep {
    fn stage(&self) -> u8 {
        match self {
            LaunderStep::Crop { .. } => 0,
            LaunderStep::Resize { .. } => 1,
            LaunderStep::Jpeg { .. } | LaunderStep::Webp { .. } => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LaunderStep::Crop { fraction } => fraction > 0.0 && fraction <= 1.0,
            LaunderStep::Resize { scale } => scale > 0.0 && scale.is_finite(),
            LaunderStep::Jpeg { quality } | LaunderStep::Webp { quality } => (1..=100).contains(&quality),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("laundering step out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunderRecipe {
    pub steps: Vec<LaunderStep>,
    pub seed: u64,
}

impl LaunderRecipe {
    pub fn new(steps: Vec<LaunderStep>, seed: u64) -> Result<Self> {
        let r = LaunderRecipe { steps, seed };
        r.validate()?;
        Ok(r)
    }

    pub fn single(step: LaunderStep) -> Result<Self> {
        LaunderRecipe::new(vec![step], 0)
    }

    /// At least one step, every parameter in range, order crop -> resize -> compress.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("laundering recipe has no steps".into()));
        }
        for s in &self.steps {
            s.validate()?;
        }
        if self.steps.windows(2).any(|w| w[0].stage() > w[1].stage()) {
            return Err(Error::Config("laundering steps must be ordered crop, resize, compression".into()));
        }
        Ok(())
    }
}

fn check_floor(w: u32, h: u32, step: &LaunderStep) -> Result<()> {
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::Image(format!("{step:?} would produce {w}x{h}, below the {MIN_SIDE}px floor")));
    }
    Ok(())
}

/// Encodes with the given lossy codec.
pub fn encode(image: &RgbImage, step: LaunderStep) -> Result<Vec<u8>> {
    match step {
        LaunderStep::Jpeg { quality } => {
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, quality).encode_image(image)?;
            Ok(buf)
        }
        LaunderStep::Webp { quality } => {
            let enc = webp::Encoder::from_rgb(image.as_raw(), image.width(), image.height());
            let mem = enc
                .encode_simple(false, quality as f32)
                .map_err(|e| Error::Image(format!("webp encode failed: {e:?}")))?;
            Ok(mem.to_vec())
        }
        other => Err(Error::Config(format!("{other:?} is not a codec"))),
    }
}

fn decode(bytes: &[u8], step: LaunderStep) -> Result<RgbImage> {
    match step {
        LaunderStep::Webp { .. } => {
            let img = webp::Decoder::new(bytes).decode().ok_or_else(|| Error::Image("webp decode failed".into()))?;
            to_rgb(img.to_image())
        }
        _ => to_rgb(image::load(Cursor::new(bytes), image::ImageFormat::Jpeg)?),
    }
}

/// Applies every step in order. Pure in `(image, recipe)`.
pub fn apply(image: &RgbImage, recipe: &LaunderRecipe) -> Result<RgbImage> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut img = image.clone();
    for step in &recipe.steps {
        let (w, h) = img.dimensions();
        img = match *step {
            LaunderStep::Crop { fraction } => {
                let side = ((fraction * w.min(h) as f64).round() as u32).max(1);
                check_floor(side, side, step)?;
                let x0 = rng.random_range(0..=w - side);
                let y0 = rng.random_range(0..=h - side);
                image::imageops::crop_imm(&img, x0, y0, side, side).to_image()
            }
            LaunderStep::Resize { scale } => {
                let (nw, nh) = scaled_dims(w, h, scale);
                check_floor(nw, nh, step)?;
                resize_rgb(&img, nw, nh)
            }
            LaunderStep::Jpeg { .. } | LaunderStep::Webp { .. } => decode(&encode(&img, *step)?, *step)?,
        };
    }
    Ok(img)
}

/// `(round(scale * w), round(scale * h))`.
pub fn scaled_dims(w: u32, h: u32, scale: f64) -> (u32, u32) {
    ((w as f64 * scale).round() as u32, (h as f64 * scale).round() as u32)
}

/// Parameter ranges of the simulated social-network pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialPipeline {
    pub crop_fraction: (f64, f64),
    pub resize_scale: (f64, f64),
    pub jpeg_quality: (u8, u8),
}

impl Default for SocialPipeline {
    fn default() -> Self {
        SocialPipeline { crop_fraction: (0.5, 1.0), resize_scale: (0.5, 1.25), jpeg_quality: (60, 100) }
    }
}

impl SocialPipeline {
    /// Draws crop, resize and JPEG parameters; the same seed gives the same recipe.
    pub fn sample(&self, seed: u64) -> LaunderRecipe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fraction = rng.random_range(self.crop_fraction.0..=self.crop_fraction.1);
        let scale = rng.random_range(self.resize_scale.0..=self.resize_scale.1);
        let quality = rng.random_range(self.jpeg_quality.0..=self.jpeg_quality.1);
        LaunderRecipe {
            steps: vec![LaunderStep::Crop { fraction }, LaunderStep::Resize { scale }, LaunderStep::Jpeg { quality }],
            seed,
        }
    }
}

pub fn social_pipeline(seed: u64) -> LaunderRecipe {
    SocialPipeline::default().sample(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    JpegQ,
    WebpQ,
    ResizeScale,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::JpegQ => "jpeg_q",
            SweepAxis::WebpQ => "webp_q",
            SweepAxis::ResizeScale => "resize_scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl SweepGrid {
    pub fn new(axis: SweepAxis, values: Vec<f64>) -> Result<Self> {
        let g = SweepGrid { axis, values };
        g.validate()?;
        Ok(g)
    }

    /// JPEG quality 100 down to 60.
    pub fn jpeg_default() -> Self {
        SweepGrid { axis: SweepAxis::JpegQ, values: vec![100.0, 90.0, 80.0, 70.0, 60.0] }
    }

    /// Scale 125% down to 25%.
    pub fn resize_default() -> Self {
        SweepGrid { axis: SweepAxis::ResizeScale, values: vec![1.25, 1.0, 0.75, 0.5, 0.25] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep grid has no values".into()));
        }
        for &v in &self.values {
            self.recipe(v)?;
        }
        Ok(())
    }

    /// Single-step recipe for one grid value.
    pub fn recipe(&self, value: f64) -> Result<LaunderRecipe> {
        let quality = || -> Result<u8> {
            if value.fract() != 0.0 || !(1.0..=100.0).contains(&value) {
                return Err(Error::Config(format!("quality {value} is not an integer in 1..=100")));
            }
            Ok(value as u8)
        };
        let step = match self.axis {
            SweepAxis::JpegQ => LaunderStep::Jpeg { quality: quality()? },
            SweepAxis::WebpQ => LaunderStep::Webp { quality: quality()? },
            SweepAxis::ResizeScale => LaunderStep::Resize { scale: value },
        };
        LaunderRecipe::single(step)
    }
}

/// One laundered copy of every image per grid value, in grid order.
pub fn sweep(images: &[RgbImage], grid: &SweepGrid) -> Result<Vec<(f64, Vec<RgbImage>)>> {
    grid.validate()?;
    grid.values
        .iter()
        .map(|&v| {
            let recipe = grid.recipe(v)?;
            let out = images.iter().map(|img| apply(img, &recipe)).collect::<Result<Vec<_>>>()?;
            Ok((v, out))
        })
        .collect()
}

/// Peak signal-to-noise ratio in dB over all channels; infinite for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Image("psnr needs equally sized images".into()));
    }
    let n = a.as_raw().len() as f64;
    let mse = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}
