//! Image carrier type and distance/quality metrics.
//!
//! Everything here is a pure function of its inputs. Pixel intensities live
//! in `[0, 255]`; during optimization they are real-valued and they are
//! quantized to integers at oracle boundaries. Metrics are computed on the
//! quantized images actually sent to an oracle, not on continuous optimizer
//! state.

use std::io::Cursor;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// PSNR reported for identical images (MSE = 0), kept finite so aggregate
/// statistics stay well-defined. Reports carry an `identical` flag alongside.
pub const PSNR_IDENTICAL_DB: f64 = 99.0;

/// SSIM window side length (Wang et al. canonical).
pub const SSIM_WINDOW: usize = 11;
/// Gaussian window standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;

const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("image {h}x{w} is smaller than the {win}x{win} ssim window")]
    ImageSmallerThanWindow { h: usize, w: usize, win: usize },
    #[error("empty verdict list")]
    EmptyVerdicts,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("png codec: {0}")]
    Png(String),
}

/// An H×W×C image with intensities in `[0, 255]`.
///
/// Channels are 1 (grayscale) or 3 (RGB). Intensities are stored as `f64`
/// so attack iterates can hold fractional values; [`Image::quantized`]
/// rounds to the 8-bit grid used on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps an `(H, W, C)` array, validating the pixel-range invariants.
    pub fn new(data: Array3<f64>) -> Result<Self, MetricError> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(MetricError::InvalidImage(format!(
                "degenerate dimensions {h}x{w}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(MetricError::InvalidImage(format!(
                "{c} channels (expected 1 or 3)"
            )));
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=255.0).contains(&v) {
                return Err(MetricError::InvalidImage(format!(
                    "intensity {v} outside [0, 255]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Builds an image from 8-bit samples in row-major `(H, W, C)` order.
    pub fn from_u8(h: usize, w: usize, c: usize, samples: &[u8]) -> Result<Self, MetricError> {
        if samples.len() != h * w * c {
            return Err(MetricError::InvalidImage(format!(
                "{} samples for {h}x{w}x{c}",
                samples.len()
            )));
        }
        let data = Array3::from_shape_vec((h, w, c), samples.iter().map(|&b| b as f64).collect())
            .expect("shape checked above");
        Self::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.data
    }

    /// True when every intensity is a whole number (already on the 8-bit grid).
    pub fn is_integral(&self) -> bool {
        self.data.iter().all(|&v| v.fract() == 0.0)
    }

    /// Rounds every intensity to the nearest integer (half away from zero)
    /// and clamps to `[0, 255]`. This is the value that crosses the wire.
    pub fn quantized(&self) -> Image {
        let data = self.data.mapv(|v| v.round().clamp(0.0, 255.0));
        Image { data }
    }

    /// Row-major 8-bit samples. Requires an integral image.
    pub fn to_u8_samples(&self) -> Result<Vec<u8>, MetricError> {
        if !self.is_integral() {
            return Err(MetricError::InvalidImage(
                "non-integral pixels; quantize before encoding".into(),
            ));
        }
        Ok(self
            .data
            .iter()
            .map(|&v| v.clamp(0.0, 255.0) as u8)
            .collect())
    }

    /// Encodes the image as PNG. The wire carries 8-bit images only, so the
    /// image must be integral.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>, MetricError> {
        let samples = self.to_u8_samples()?;
        let (h, w, c) = self.shape();
        let dynimg = match c {
            1 => ::image::DynamicImage::ImageLuma8(
                ::image::GrayImage::from_raw(w as u32, h as u32, samples)
                    .expect("buffer sized from shape"),
            ),
            3 => ::image::DynamicImage::ImageRgb8(
                ::image::RgbImage::from_raw(w as u32, h as u32, samples)
                    .expect("buffer sized from shape"),
            ),
            _ => unreachable!("channel invariant"),
        };
        let mut buf = Vec::new();
        dynimg
            .write_to(&mut Cursor::new(&mut buf), ::image::ImageFormat::Png)
            .map_err(|e| MetricError::Png(e.to_string()))?;
        Ok(buf)
    }

    /// Decodes a PNG (or any format the codec recognizes). Grayscale inputs
    /// become 1-channel images; everything else is converted to RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, MetricError> {
        let decoded =
            ::image::load_from_memory(bytes).map_err(|e| MetricError::Png(e.to_string()))?;
        Ok(match decoded {
            ::image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::from_u8(h as usize, w as usize, 1, g.as_raw())?
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::from_u8(h as usize, w as usize, 3, rgb.as_raw())?
            }
        })
    }
}

/// Quality accounting for one (original, adversarial) pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    /// Mean structural similarity; `None` when the image is smaller than the
    /// 11×11 window.
    pub ssim: Option<f64>,
    pub linf: f64,
    /// Set when MSE is exactly zero; `psnr_db` then holds the sentinel value.
    pub identical: bool,
}

impl MetricReport {
    /// Computes the full report for a pair of same-shaped images.
    pub fn between(a: &Image, b: &Image) -> Result<Self, MetricError> {
        let mse = mse(a, b)?;
        let psnr_db = psnr(a, b)?;
        let ssim = match ssim(a, b) {
            Ok(v) => Some(v),
            Err(MetricError::ImageSmallerThanWindow { .. }) => None,
            Err(e) => return Err(e),
        };
        let linf = linf_distance(a, b)?;
        Ok(Self {
            mse,
            psnr_db,
            ssim,
            linf,
            identical: mse == 0.0,
        })
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch {
            a: a.shape(),
            b: b.shape(),
        });
    }
    Ok(())
}

/// Mean squared error, normalized by `H·W·C`.
pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let n = a.pixels().len() as f64;
    let sum: f64 = Zip::from(a.pixels())
        .and(b.pixels())
        .fold(0.0, |acc, &x, &y| {
            let d = x - y;
            acc + d * d
        });
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in decibels: `10·log10(255²/MSE)`.
///
/// Identical images have MSE 0; the sentinel [`PSNR_IDENTICAL_DB`] is
/// returned so aggregates stay finite.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    Ok(10.0 * (255.0 * 255.0 / e).log10())
}

/// Maximum absolute per-pixel difference.
pub fn linf_distance(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    Ok(Zip::from(a.pixels())
        .and(b.pixels())
        .fold(0.0f64, |acc, &x, &y| acc.max((x - y).abs())))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k1 = Vec::with_capacity(SSIM_WINDOW);
    for i in -r..=r {
        let x = i as f64 / SSIM_SIGMA;
        k1.push((-0.5 * x * x).exp());
    }
    let s: f64 = k1.iter().sum();
    for v in &mut k1 {
        *v /= s;
    }
    let mut k2 = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for &a in &k1 {
        for &b in &k1 {
            k2.push(a * b);
        }
    }
    k2
}

/// Mean structural similarity over 11×11 Gaussian windows (σ = 1.5,
/// C1 = (0.01·255)², C2 = (0.03·255)²), computed per channel over all valid
/// window positions and averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::ImageSmallerThanWindow {
            h,
            w,
            win: SSIM_WINDOW,
        });
    }
    let kernel = gaussian_window();
    let ap = a.pixels();
    let bp = b.pixels();
    let mut channel_sum = 0.0;
    for ch in 0..c {
        let mut total = 0.0;
        let mut count = 0u64;
        for i0 in 0..=(h - SSIM_WINDOW) {
            for j0 in 0..=(w - SSIM_WINDOW) {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                let mut k = 0usize;
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let wgt = kernel[k];
                        k += 1;
                        let x = ap[(i0 + di, j0 + dj, ch)];
                        let y = bp[(i0 + di, j0 + dj, ch)];
                        mx += wgt * x;
                        my += wgt * y;
                        sxx += wgt * x * x;
                        syy += wgt * y * y;
                        sxy += wgt * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cxy = sxy - mx * my;
                let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                total += s;
                count += 1;
            }
        }
        channel_sum += total / count as f64;
    }
    Ok(channel_sum / c as f64)
}

/// Fraction of verdicts whose predicted label differs from the true label.
pub fn escape_rate<S: AsRef<str>>(verdicts: &[(S, S)]) -> Result<f64, MetricError> {
    if verdicts.is_empty() {
        return Err(MetricError::EmptyVerdicts);
    }
    let wrong = verdicts
        .iter()
        .filter(|(t, p)| t.as_ref() != p.as_ref())
        .count();
    Ok(wrong as f64 / verdicts.len() as f64)
}
