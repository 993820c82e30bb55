//! Thermal image enhancement: linear brightness/contrast stretching followed
//! by Gaussian unsharp sharpening.
//!
//! All arithmetic is carried out in `f64`; values are clamped to the 8-bit
//! display range `[0, 255]` after each externally visible step and quantized
//! only when a frame is exported to PNG.

use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel raster with grayscale intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalFrame {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ThermalFrame {
    /// Builds a frame from row-major values, validating dimensions and range.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "expected {} values for a {width}x{height} frame, got {}",
                width * height,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite() && (0.0..=255.0).contains(v)) {
            return Err(Error::InvalidParameter(
                "frame values must be finite and within [0, 255]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// A frame where every pixel has the same value.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Population variance of the pixel values.
    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }

    /// Mean absolute response of the 4-neighbour Laplacian, a scalar proxy
    /// for how much fine detail the frame carries.
    pub fn laplacian_energy(&self) -> f64 {
        let (w, h) = (self.width as isize, self.height as isize);
        let at = |x: isize, y: isize| {
            let x = x.clamp(0, w - 1) as usize;
            let y = y.clamp(0, h - 1) as usize;
            self.values[y * self.width + x]
        };
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1)
                    - 4.0 * at(x, y);
                acc += lap.abs();
            }
        }
        acc / (self.width * self.height) as f64
    }

    /// Quantizes to an 8-bit grayscale image (round to nearest).
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.get(x as usize, y as usize).round() as u8])
        })
    }

    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = img.pixels().map(|p| p.0[0] as f64).collect();
        Self::new(w, h, values)
    }

    pub fn save_png<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.to_gray_image()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png<P: AsRef<Path>>(path: P) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        Self::from_gray_image(&img)
    }
}

/// Parameters of the two-stage enhancement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Contrast gain of the linear stretch, must be > 0.
    pub a: f64,
    /// Brightness offset in grayscale units.
    pub b: f64,
    /// Sharpening intensity, must be >= 0.
    pub h: f64,
    /// Standard deviation of the Gaussian blur in pixels, must be > 0.
    pub sigma: f64,
    /// Odd kernel side length; `None` picks the smallest odd integer >= 6*sigma.
    pub kernel_size: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            a: 1.2,
            b: 10.0,
            h: 1.0,
            sigma: 2.0,
            kernel_size: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || self.a <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "contrast gain a must be finite and > 0, got {}",
                self.a
            )));
        }
        if !self.b.is_finite() {
            return Err(Error::InvalidParameter("brightness offset b must be finite".into()));
        }
        if !self.h.is_finite() || self.h < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sharpening intensity h must be finite and >= 0, got {}",
                self.h
            )));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma must be finite and > 0, got {}",
                self.sigma
            )));
        }
        if let Some(k) = self.kernel_size {
            if k % 2 == 0 || k == 0 {
                return Err(Error::InvalidParameter(format!(
                    "kernel_size must be odd and >= 1, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Effective kernel side length: explicit value or smallest odd >= 6*sigma.
    pub fn effective_kernel_size(&self) -> usize {
        match self.kernel_size {
            Some(k) => k,
            None => {
                let k = (6.0 * self.sigma).ceil() as usize;
                if k.is_multiple_of(2) {
                    k + 1
                } else {
                    k.max(1)
                }
            }
        }
    }
}

/// Square Gaussian kernel normalized to sum exactly one.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    size: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }
}

/// Per-pixel grayscale stretch `clamp(a*P + b, 0, 255)`.
pub fn linear_transform(frame: &ThermalFrame, a: f64, b: f64) -> Result<ThermalFrame> {
    if !a.is_finite() || !b.is_finite() || a <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "linear transform requires finite a > 0 and finite b, got a={a}, b={b}"
        )));
    }
    let values = frame
        .values
        .iter()
        .map(|p| (a * p + b).clamp(0.0, 255.0))
        .collect();
    ThermalFrame::new(frame.width, frame.height, values)
}

/// Samples `G(x, y) = exp(-(x^2 + y^2) / (2 sigma^2))` at integer offsets
/// centered on zero and renormalizes so the entries sum to one. The `1/(2 pi
/// sigma^2)` factor cancels in the normalization.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<GaussianKernel> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma must be finite and > 0, got {sigma}"
        )));
    }
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "kernel size must be odd and >= 1, got {size}"
        )));
    }
    let half = (size / 2) as isize;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for y in -half..=half {
        for x in -half..=half {
            let w = (-((x * x + y * y) as f64) * inv_two_sigma_sq).exp();
            weights.push(w);
            sum += w;
        }
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(GaussianKernel { size, weights })
}

/// 2-D convolution with reflected borders (`a b c | c b a` indexing).
fn convolve_reflect(frame: &ThermalFrame, kernel: &GaussianKernel) -> Vec<f64> {
    let (w, h) = (frame.width as isize, frame.height as isize);
    let half = (kernel.size / 2) as isize;
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        // Kernel size is bounded by the frame, so one fold suffices.
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        }
        i as usize
    };
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in -half..=half {
                let sy = reflect(y + ky, h);
                for kx in -half..=half {
                    let sx = reflect(x + kx, w);
                    acc += kernel.get((ky + half) as usize, (kx + half) as usize)
                        * frame.values[sy * frame.width + sx];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Unsharp masking: `clamp(P + h * (P - P * G), 0, 255)`.
pub fn unsharp_sharpen(
    frame: &ThermalFrame,
    h: f64,
    kernel: &GaussianKernel,
) -> Result<ThermalFrame> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sharpening intensity h must be finite and >= 0, got {h}"
        )));
    }
    if kernel.size > frame.width || kernel.size > frame.height {
        return Err(Error::InvalidParameter(format!(
            "kernel size {} exceeds frame dimensions {}x{}",
            kernel.size, frame.width, frame.height
        )));
    }
    let blurred = convolve_reflect(frame, kernel);
    let values = frame
        .values
        .iter()
        .zip(&blurred)
        .map(|(p, g)| (p + h * (p - g)).clamp(0.0, 255.0))
        .collect();
    ThermalFrame::new(frame.width, frame.height, values)
}

/// Full enhancement pipeline: linear stretch, then unsharp sharpening.
pub fn preprocess(frame: &ThermalFrame, cfg: &PreprocessConfig) -> Result<ThermalFrame> {
    cfg.validate()?;
    let stretched = linear_transform(frame, cfg.a, cfg.b)?;
    let kernel = gaussian_kernel(cfg.sigma, cfg.effective_kernel_size())?;
    unsharp_sharpen(&stretched, cfg.h, &kernel)
}
