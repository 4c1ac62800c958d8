//! Separable resampling shared by preprocessing, laundering and decimation.
//!
//! Filters are evaluated in `f64`. When shrinking, the kernel is stretched by
//! the scale factor so the resampler also acts as an anti-aliasing filter.

use image::RgbImage;

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom), support 2.
pub fn bicubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample taps: first input index and normalized weights.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    taps: Vec<(usize, Vec<f64>)>,
}

impl AxisTaps {
    /// Taps mapping `n_in` samples to `n_out`, for a kernel of half-width `support`.
    pub(crate) fn new(n_in: usize, n_out: usize, kernel: impl Fn(f64) -> f64, support: f64) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let filter_scale = scale.max(1.0);
        let reach = support * filter_scale;
        let taps = (0..n_out)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale;
                let lo = ((center - reach + 0.5).floor().max(0.0)) as usize;
                let hi = ((center + reach + 0.5).floor() as usize).min(n_in);
                let mut w: Vec<f64> = (lo..hi).map(|j| kernel((j as f64 - center + 0.5) / filter_scale)).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
                (lo, w)
            })
            .collect();
        AxisTaps { taps }
    }
}

/// Resizes one row-major plane; horizontal pass first, then vertical.
pub fn resize_plane(src: &[f64], width: usize, height: usize, new_width: usize, new_height: usize) -> Vec<f64> {
    assert_eq!(src.len(), width * height);
    let horizontal = AxisTaps::new(width, new_width, bicubic, 2.0);
    let vertical = AxisTaps::new(height, new_height, bicubic, 2.0);
    resample(src, width, height, &horizontal, &vertical)
}

pub(crate) fn resample(
    src: &[f64],
    width: usize,
    height: usize,
    horizontal: &AxisTaps,
    vertical: &AxisTaps,
) -> Vec<f64> {
    let new_width = horizontal.taps.len();
    let new_height = vertical.taps.len();
    let mut tmp = vec![0.0; height * new_width];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for (x, (lo, w)) in horizontal.taps.iter().enumerate() {
            tmp[y * new_width + x] = w.iter().zip(&row[*lo..]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; new_height * new_width];
    for (y, (lo, w)) in vertical.taps.iter().enumerate() {
        let dst = &mut out[y * new_width..(y + 1) * new_width];
        for (k, wk) in w.iter().enumerate() {
            let srow = &tmp[(lo + k) * new_width..(lo + k + 1) * new_width];
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += wk * s;
            }
        }
    }
    out
}

/// Splits an RGB image into three planes scaled to `[0, 1]`.
pub fn rgb_planes(img: &RgbImage) -> [Vec<f64>; 3] {
    let mut planes: [Vec<f64>; 3] = Default::default();
    for p in planes.iter_mut() {
        p.reserve(img.width() as usize * img.height() as usize);
    }
    for px in img.pixels() {
        for c in 0..3 {
            planes[c].push(px[c] as f64 / 255.0);
        }
    }
    planes
}

/// Reassembles `[0, 1]` planes into an 8-bit image, rounding and clamping.
pub fn planes_to_rgb(planes: &[Vec<f64>; 3], width: u32, height: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let i = y as usize * width as usize + x as usize;
        image::Rgb(std::array::from_fn(|c| (planes[c][i] * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Bicubic resize of an 8-bit RGB image.
pub fn resize_rgb(img: &RgbImage, new_width: u32, new_height: u32) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes = rgb_planes(img).map(|p| resize_plane(&p, w, h, new_width as usize, new_height as usize));
    planes_to_rgb(&planes, new_width, new_height)
}
