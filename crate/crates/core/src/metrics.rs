//! Full-reference quality metrics on the BT.601 studio-swing luminance
//! channel: PSNR and Gaussian-window SSIM.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{input_err, Result};
use crate::rcp::RgbImage;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `Y = 16/255 + (65.481 R + 128.553 G + 24.966 B) / 255` per pixel,
/// returned as `(B, 1, H, W)`.
pub fn luminance(image: &RgbImage) -> Array4<f64> {
    let d = image.data();
    let (b, _, h, w) = d.dim();
    Array4::from_shape_fn((b, 1, h, w), |(n, _, y, x)| {
        let (r, g, bl) = (d[[n, 0, y, x]] as f64, d[[n, 1, y, x]] as f64, d[[n, 2, y, x]] as f64);
        (16.0 + 65.481 * r + 128.553 * g + 24.966 * bl) / 255.0
    })
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &Array4<f64>, gt: &Array4<f64>, data_range: f64) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return input_err(format!("psnr shapes {:?} vs {:?}", pred.dim(), gt.dim()));
    }
    if pred.is_empty() {
        return input_err("psnr of empty images");
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable valid-region filtering with the normalised 1-D window.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows = Array2::from_shape_fn((h, ow), |(y, x)| (0..n).map(|i| k[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..n).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>())
}

fn ssim_plane(x: &Array2<f64>, y: &Array2<f64>, k: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mx = filter_valid(x, k);
    let my = filter_valid(y, k);
    let sxx = filter_valid(&(x * x), k);
    let syy = filter_valid(&(y * y), k);
    let sxy = filter_valid(&(x * y), k);
    let mut total = 0.0;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mx.iter().zip(&my).zip(&sxx).zip(&syy).zip(&sxy) {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / mx.len() as f64
}

/// Mean SSIM (11x11 Gaussian, sigma 1.5, data range 1), averaged over
/// every (batch, channel) plane.
pub fn ssim(pred: &Array4<f64>, gt: &Array4<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return input_err(format!("ssim shapes {:?} vs {:?}", pred.dim(), gt.dim()));
    }
    let (b, c, h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return input_err(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for n in 0..b {
        for ch in 0..c {
            let x = pred.index_axis(Axis(0), n).index_axis(Axis(0), ch).to_owned();
            let y = gt.index_axis(Axis(0), n).index_axis(Axis(0), ch).to_owned();
            total += ssim_plane(&x, &y, &k);
        }
    }
    Ok(total / (b * c) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    /// Luminance only (the reporting convention).
    #[default]
    Y,
    Rgb,
}

fn finite_or_tag<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "nan" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImageScore {
    #[serde(serialize_with = "finite_or_tag")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image and mean scores. PSNR of an exact match is `+inf` (written as
/// `"inf"` in JSON).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub color_space: ColorSpace,
    pub per_image: BTreeMap<String, ImageScore>,
    #[serde(serialize_with = "finite_or_tag")]
    pub mean_psnr: f64,
    #[serde(serialize_with = "finite_or_tag")]
    pub mean_ssim: f64,
}

pub fn score(pred: &RgbImage, gt: &RgbImage, space: ColorSpace) -> Result<ImageScore> {
    let (p, g) = match space {
        ColorSpace::Y => (luminance(pred), luminance(gt)),
        ColorSpace::Rgb => (pred.data().mapv(f64::from), gt.data().mapv(f64::from)),
    };
    Ok(ImageScore { psnr: psnr(&p, &g, 1.0)?, ssim: ssim(&p, &g)? })
}

impl MetricReport {
    pub fn new(space: ColorSpace, per_image: BTreeMap<String, ImageScore>) -> Self {
        let n = per_image.len().max(1) as f64;
        let (mean_psnr, mean_ssim) = if per_image.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                per_image.values().map(|s| s.psnr).sum::<f64>() / n,
                per_image.values().map(|s| s.ssim).sum::<f64>() / n,
            )
        };
        Self { color_space: space, per_image, mean_psnr, mean_ssim }
    }

    /// Tab-separated table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("key\tpsnr\tssim\n");
        for (k, s) in &self.per_image {
            out.push_str(&format!("{k}\t{:.4}\t{:.4}\n", s.psnr, s.ssim));
        }
        out.push_str(&format!("mean\t{:.4}\t{:.4}\n", self.mean_psnr, self.mean_ssim));
        out
    }
}
