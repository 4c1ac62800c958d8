//! Fourier analysis of noise residuals: averaged power spectra, peak
//! detection and anti-aliased decimation.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{pairwise_sum, Scalar};
use crate::raster::{planes_to_rgb, rgb_planes};

/// Smallest side accepted by [`noise_residual`].
pub const MIN_RESIDUAL_SIDE: usize = 32;
/// Smallest side [`decimate`] may produce.
pub const MIN_DECIMATED_SIDE: usize = 16;
/// Default peak threshold, in robust standard deviations.
pub const DEFAULT_K: f64 = 6.0;
const NEIGHBORHOOD: usize = 9;
const MAD_TO_SIGMA: f64 = 1.4826;

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "plane data length");
        Plane { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Plane { width, height, data }
    }

    /// BT.601 luma on the 0..255 scale.
    pub fn luminance(img: &RgbImage) -> Self {
        let data =
            img.pixels().map(|p| T::of(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)).collect();
        Plane { width: img.width() as usize, height: img.height() as usize, data }
    }

    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn energy(&self) -> T {
        pairwise_sum(&self.data.iter().map(|&v| v * v).collect::<Vec<_>>())
    }

    pub fn mean(&self) -> T {
        pairwise_sum(&self.data) / T::of(self.data.len() as f64)
    }

    pub fn variance(&self) -> T {
        let m = self.mean();
        pairwise_sum(&self.data.iter().map(|&v| (v - m) * (v - m)).collect::<Vec<_>>()) / T::of(self.data.len() as f64)
    }

    /// Center crop, zero-padding any side shorter than `side`.
    pub fn fit_to_side(&self, side: usize) -> Self {
        let off = |n: usize| -> (usize, usize) {
            if n >= side {
                ((n - side) / 2, 0)
            } else {
                (0, (side - n) / 2)
            }
        };
        let (sx, dx) = off(self.width);
        let (sy, dy) = off(self.height);
        let mut out = vec![T::zero(); side * side];
        for y in 0..side.min(self.height) {
            for x in 0..side.min(self.width) {
                out[(y + dy) * side + x + dx] = self.at(x + sx, y + sy);
            }
        }
        Plane::new(side, side, out)
    }
}

fn median_in_place<T: Scalar>(v: &mut [T]) -> T {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite"));
    let upper = *m;
    if v.len() % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(T::neg_infinity(), T::max);
        (lower + upper) / T::of(2.0)
    }
}

/// 3x3 median filter with periodic borders, matching the FFT's periodic
/// extension. Replicated borders break periodic patterns at the image edge and
/// put a spurious line on the spectrum axes.
pub fn median3x3<T: Scalar>(p: &Plane<T>) -> Plane<T> {
    let (w, h) = (p.width as isize, p.height as isize);
    let mut window = [T::zero(); 9];
    Plane::from_fn(p.width, p.height, |x, y| {
        let mut i = 0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let xx = (x as isize + dx).rem_euclid(w) as usize;
                let yy = (y as isize + dy).rem_euclid(h) as usize;
                window[i] = p.at(xx, yy);
                i += 1;
            }
        }
        median_in_place(&mut window)
    })
}

/// Luminance minus its 3x3 median, shifted to zero mean.
pub fn noise_residual<T: Scalar>(img: &RgbImage) -> Result<Plane<T>> {
    residual_of_plane(&Plane::luminance(img))
}

pub fn residual_of_plane<T: Scalar>(lum: &Plane<T>) -> Result<Plane<T>> {
    if lum.width < MIN_RESIDUAL_SIDE || lum.height < MIN_RESIDUAL_SIDE {
        return Err(Error::Image(format!(
            "residual needs at least {MIN_RESIDUAL_SIDE}px per side, got {}x{}",
            lum.width, lum.height
        )));
    }
    let med = median3x3(lum);
    let mut data: Vec<T> = lum.data.iter().zip(&med.data).map(|(&a, &b)| a - b).collect();
    let mean = pairwise_sum(&data) / T::of(data.len() as f64);
    data.iter_mut().for_each(|v| *v = *v - mean);
    Ok(Plane::new(lum.width, lum.height, data))
}

/// Averaged power spectrum, DC at `(side/2, side/2)`, stored linear.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMap<T> {
    pub side: usize,
    pub power: Vec<T>,
    pub n_images: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectrumSidecar {
    side: usize,
    n_images: usize,
}

impl<T: Scalar> SpectrumMap<T> {
    /// Power at frequency `(u, v)` relative to DC.
    pub fn at(&self, u: isize, v: isize) -> T {
        let s = self.side as isize;
        let c = s / 2;
        let x = (c + u).rem_euclid(s) as usize;
        let y = (c + v).rem_euclid(s) as usize;
        self.power[y * self.side + x]
    }

    pub fn total_power(&self) -> T {
        pairwise_sum(&self.power)
    }

    /// Log-scaled grayscale rendering normalized to the full 8-bit range.
    pub fn to_image(&self) -> GrayImage {
        let logs: Vec<f64> = self.power.iter().map(|p| p.as_f64().ln_1p()).collect();
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        GrayImage::from_fn(self.side as u32, self.side as u32, |x, y| {
            let v = (logs[y as usize * self.side + x as usize] - lo) / span;
            image::Luma([(v * 255.0).round() as u8])
        })
    }

    /// Writes `<stem>.png`, `<stem>.f32` (little-endian) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.to_image().save(dir.join(format!("{stem}.png")))?;
        let raw: Vec<u8> = self.power.iter().flat_map(|p| p.as_f32().to_le_bytes()).collect();
        fs::write(dir.join(format!("{stem}.f32")), raw)?;
        let meta = SpectrumSidecar { side: self.side, n_images: self.n_images };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: SpectrumSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        let raw = fs::read(dir.join(format!("{stem}.f32")))?;
        if raw.len() != meta.side * meta.side * 4 {
            return Err(Error::Image(format!(
                "spectrum file has {} bytes, expected {}",
                raw.len(),
                meta.side * meta.side * 4
            )));
        }
        let power =
            raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
        Ok(SpectrumMap { side: meta.side, power, n_images: meta.n_images })
    }
}

/// `|FFT2(plane)|^2`, DC-centered. The plane must be square.
pub fn power_spectrum<T: Scalar>(plane: &Plane<T>) -> Vec<T> {
    assert_eq!(plane.width, plane.height, "power_spectrum needs a square plane");
    let n = plane.width;
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf: Vec<Complex<T>> = plane.data.iter().map(|&v| Complex::new(v, T::zero())).collect();
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    let c = n / 2;
    let mut out = vec![T::zero(); n * n];
    for y in 0..n {
        for x in 0..n {
            let sy = (y + c) % n;
            let sx = (x + c) % n;
            out[sy * n + sx] = buf[y * n + x].norm_sqr();
        }
    }
    out
}

/// Mean over images of the power spectrum of each luminance plane's noise residual,
/// center-cropped or padded to `side`.
pub fn mean_power_spectrum<T: Scalar>(luminance: &[Plane<T>], side: usize) -> Result<SpectrumMap<T>> {
    if luminance.is_empty() {
        return Err(Error::Empty("mean_power_spectrum needs at least one image"));
    }
    if side == 0 {
        return Err(Error::Config("spectrum side must be positive".into()));
    }
    let spectra = luminance
        .iter()
        .map(|p| Ok(power_spectrum(&residual_of_plane(p)?.fit_to_side(side))))
        .collect::<Result<Vec<_>>>()?;
    let n = T::of(spectra.len() as f64);
    let mut column = vec![T::zero(); spectra.len()];
    let power = (0..side * side)
        .map(|i| {
            for (c, s) in column.iter_mut().zip(&spectra) {
                *c = s[i];
            }
            pairwise_sum(&column) / n
        })
        .collect();
    Ok(SpectrumMap { side, power, n_images: spectra.len() })
}

/// RGB convenience wrapper around [`mean_power_spectrum`].
pub fn mean_power_spectrum_rgb<T: Scalar>(images: &[RgbImage], side: usize) -> Result<SpectrumMap<T>> {
    let planes: Vec<Plane<T>> = images.iter().map(Plane::luminance).collect();
    mean_power_spectrum(&planes, side)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Horizontal frequency index relative to DC.
    pub u: isize,
    /// Vertical frequency index relative to DC.
    pub v: isize,
    /// Power over the local background median.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub peaks: Vec<Peak>,
    pub background_median: f64,
    pub background_spread: f64,
}

fn median_and_spread(values: &mut [f64]) -> (f64, f64) {
    let med = median_in_place(values);
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    (med, MAD_TO_SIGMA * median_in_place(&mut dev))
}

/// A bin is a peak when it is the maximum of its 9x9 neighbourhood (wrapping)
/// and exceeds the neighbourhood median by `k` robust standard deviations.
/// DC and its 3x3 surround are never reported.
pub fn detect_peaks<T: Scalar>(spectrum: &SpectrumMap<T>, k: f64) -> Result<PeakReport> {
    if !(k > 0.0) {
        return Err(Error::Config(format!("peak threshold k must be positive, got {k}")));
    }
    let s = spectrum.side;
    let c = (s / 2) as isize;
    let p: Vec<f64> = spectrum.power.iter().map(|v| v.as_f64()).collect();
    let half = (NEIGHBORHOOD / 2) as isize;
    let mut window = Vec::with_capacity(NEIGHBORHOOD * NEIGHBORHOOD);
    let mut peaks = Vec::new();
    for y in 0..s {
        for x in 0..s {
            let (u, v) = (x as isize - c, y as isize - c);
            if u.abs() <= 1 && v.abs() <= 1 {
                continue;
            }
            let centre = p[y * s + x];
            window.clear();
            let mut is_max = true;
            for dy in -half..=half {
                for dx in -half..=half {
                    let yy = (y as isize + dy).rem_euclid(s as isize) as usize;
                    let xx = (x as isize + dx).rem_euclid(s as isize) as usize;
                    let val = p[yy * s + xx];
                    if val > centre {
                        is_max = false;
                    }
                    window.push(val);
                }
            }
            if !is_max {
                continue;
            }
            let (med, spread) = median_and_spread(&mut window);
            if centre > med + k * spread {
                let ratio = if med > 0.0 { centre / med } else { f64::INFINITY };
                peaks.push(Peak { u, v, ratio });
            }
        }
    }
    peaks.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then((a.v, a.u).cmp(&(b.v, b.u))));
    let (background_median, background_spread) = median_and_spread(&mut p.clone());
    Ok(PeakReport { peaks, background_median, background_spread })
}

/// Lanczos-3 windowed sinc low-pass with cutoff `pi / factor`, unit DC gain.
fn lowpass_taps(factor: usize) -> Vec<f64> {
    let f = factor as f64;
    let reach = 3 * factor;
    let sinc = |x: f64| if x == 0.0 { 1.0 } else { (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) };
    let mut taps: Vec<f64> =
        (0..2 * reach + 1).map(|i| i as f64 - reach as f64).map(|n| sinc(n / f) * sinc(n / (3.0 * f))).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Filters with periodic extension, like the residual and the FFT, so the
/// borders add no discontinuity of their own.
fn decimate_axis(
    src: &[f64],
    width: usize,
    height: usize,
    factor: usize,
    taps: &[f64],
    horizontal: bool,
) -> (Vec<f64>, usize, usize) {
    let reach = (taps.len() / 2) as isize;
    let (out_w, out_h) = if horizontal { (width / factor, height) } else { (width, height / factor) };
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let off = k as isize - reach;
                let v = if horizontal {
                    src[y * width + ((x * factor) as isize + off).rem_euclid(width as isize) as usize]
                } else {
                    src[((y * factor) as isize + off).rem_euclid(height as isize) as usize * width + x]
                };
                acc += t * v;
            }
            out[y * out_w + x] = acc;
        }
    }
    (out, out_w, out_h)
}

fn check_factor(width: usize, height: usize, factor: usize) -> Result<()> {
    if factor < 2 {
        return Err(Error::Config(format!("decimation factor must be at least 2, got {factor}")));
    }
    if width / factor < MIN_DECIMATED_SIDE || height / factor < MIN_DECIMATED_SIDE {
        return Err(Error::Config(format!(
            "factor {factor} reduces {width}x{height} below the {MIN_DECIMATED_SIDE}px floor"
        )));
    }
    Ok(())
}

fn decimate_raw(src: &[f64], width: usize, height: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    let cw = width - width % factor;
    let ch = height - height % factor;
    let (x0, y0) = ((width - cw) / 2, (height - ch) / 2);
    let cropped: Vec<f64> =
        (y0..y0 + ch).flat_map(|y| src[y * width + x0..y * width + x0 + cw].iter().copied()).collect();
    let taps = lowpass_taps(factor);
    let (tmp, tw, th) = decimate_axis(&cropped, cw, ch, factor, &taps, true);
    decimate_axis(&tmp, tw, th, factor, &taps, false)
}

/// Low-pass then keep every `factor`-th sample in both directions.
pub fn decimate_plane<T: Scalar>(plane: &Plane<T>, factor: usize) -> Result<Plane<T>> {
    check_factor(plane.width, plane.height, factor)?;
    let src: Vec<f64> = plane.data.iter().map(|v| v.as_f64()).collect();
    let (out, w, h) = decimate_raw(&src, plane.width, plane.height, factor);
    Ok(Plane::new(w, h, out.into_iter().map(T::of).collect()))
}

/// RGB decimation; sides are first center-cropped to multiples of `factor`.
pub fn decimate(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    check_factor(w, h, factor)?;
    let mut dims = (0, 0);
    let planes = rgb_planes(img).map(|p| {
        let (out, ow, oh) = decimate_raw(&p, w, h, factor);
        dims = (ow, oh);
        out
    });
    Ok(planes_to_rgb(&planes, dims.0 as u32, dims.1 as u32))
}
