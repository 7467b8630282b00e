//! Residue channel prior: per-pixel `max(R,G,B) - min(R,G,B)`.
//!
//! Any achromatic additive term `s * (1, 1, 1)` cancels in the difference, so
//! the prior of a rainy image with grey streaks matches the prior of its
//! background wherever nothing clips.

use ndarray::{Array4, Axis};

use crate::error::{input_err, Result};
use crate::tensor::Real;

/// `(B, 3, H, W)` image with every value finite and inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage(Array4<f32>);

impl RgbImage {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.dim().1 != 3 {
            return input_err(format!("RGB image needs 3 channels, got {}", data.dim().1));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return input_err(format!("RGB value {v} outside [0, 1]"));
        }
        Ok(Self(data))
    }

    /// Clamps into `[0, 1]` (NaN becomes 0) instead of rejecting.
    pub fn clamped(data: Array4<f32>) -> Result<Self> {
        Self::new(data.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f32> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().2
    }

    pub fn width(&self) -> usize {
        self.0.dim().3
    }
}

/// `(B, 1, H, W)` prior, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueMap(Array4<f32>);

impl ResidueMap {
    pub fn data(&self) -> &Array4<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f32> {
        self.0
    }
}

pub fn residue_channel(image: &RgbImage) -> ResidueMap {
    let (out, _) = residue_with_extrema(image.data()).expect("RgbImage has 3 channels");
    ResidueMap(out)
}

/// Raw-array form used by the autodiff engine. Also returns, per pixel, the
/// channel indices of the maximum and minimum (first occurrence on ties).
pub fn residue_with_extrema<T: Real>(x: &Array4<T>) -> Result<(Array4<T>, Vec<(u8, u8)>)> {
    let (b, c, h, w) = x.dim();
    if c != 3 {
        return input_err(format!("residue channel needs 3 channels, got {c}"));
    }
    let mut out = Array4::<T>::zeros((b, 1, h, w));
    let mut arg = Vec::with_capacity(b * h * w);
    for (n, img) in x.outer_iter().enumerate() {
        let (r, g, bl) = (img.index_axis(Axis(0), 0), img.index_axis(Axis(0), 1), img.index_axis(Axis(0), 2));
        let mut dst = out.index_axis_mut(Axis(0), n);
        let mut dst = dst.index_axis_mut(Axis(0), 0);
        for (o, ((&rv, &gv), &bv)) in dst.iter_mut().zip(r.iter().zip(g.iter()).zip(bl.iter())) {
            let vals = [rv, gv, bv];
            let mut hi = 0u8;
            let mut lo = 0u8;
            for k in 1..3u8 {
                if vals[k as usize] > vals[hi as usize] {
                    hi = k;
                }
                if vals[k as usize] < vals[lo as usize] {
                    lo = k;
                }
            }
            *o = vals[hi as usize] - vals[lo as usize];
            arg.push((hi, lo));
        }
    }
    Ok((out, arg))
}

/// Divides each channel by its chromaticity weight and clamps to `[0, 1]`.
pub fn normalize_chromaticity(image: &RgbImage, alpha: [f32; 3]) -> Result<RgbImage> {
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return input_err(format!("chromaticity weights must be positive, got {a}"));
    }
    let mut out = image.data().clone();
    for (ch, a) in alpha.iter().enumerate() {
        out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v / a).clamp(0.0, 1.0));
    }
    RgbImage::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pixel(r: f32, g: f32, b: f32) -> RgbImage {
        RgbImage::new(Array4::from_shape_vec((1, 3, 1, 1), vec![r, g, b]).unwrap()).unwrap()
    }

    #[test]
    fn gray_and_red() {
        assert_eq!(residue_channel(&pixel(0.5, 0.5, 0.5)).data()[[0, 0, 0, 0]], 0.0);
        assert_eq!(residue_channel(&pixel(1.0, 0.0, 0.0)).data()[[0, 0, 0, 0]], 1.0);
    }

    #[test]
    fn rejects_bad_images() {
        assert!(RgbImage::new(Array4::zeros((1, 2, 2, 2))).is_err());
        assert!(RgbImage::new(Array4::from_elem((1, 3, 1, 1), 1.5)).is_err());
        assert!(RgbImage::new(Array4::from_elem((1, 3, 1, 1), f32::NAN)).is_err());
        assert!(residue_with_extrema(&Array4::<f32>::zeros((1, 4, 2, 2))).is_err());
    }

    #[test]
    fn normalization() {
        let img = pixel(0.5, 0.5, 0.5);
        assert_eq!(normalize_chromaticity(&img, [1.0, 1.0, 1.0]).unwrap(), img);
        let n = normalize_chromaticity(&img, [1.0, 1.0, 0.5]).unwrap();
        assert_eq!(n.data().iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5, 1.0]);
        assert!(normalize_chromaticity(&img, [1.0, 0.0, 1.0]).is_err());
        assert!(normalize_chromaticity(&img, [1.0, -2.0, 1.0]).is_err());
    }

    fn rgb_pixels(n: usize) -> impl Strategy<Value = Vec<[f32; 3]>> {
        proptest::collection::vec([0.0f32..=1.0, 0.0f32..=1.0, 0.0f32..=1.0], n)
    }

    proptest! {
        #[test]
        fn achromatic_offset_cancels(px in rgb_pixels(16), s in proptest::collection::vec(0.0f32..1.0, 16)) {
            let clean: Vec<f32> = (0..3).flat_map(|c| px.iter().map(move |p| p[c])).collect();
            let offs: Vec<f32> = px.iter().zip(&s).map(|(p, s)| s * (1.0 - p.iter().cloned().fold(0.0, f32::max))).collect();
            let rainy: Vec<f32> = (0..3).flat_map(|c| px.iter().zip(&offs).map(move |(p, o)| p[c] + o)).collect();
            let a = residue_channel(&RgbImage::new(Array4::from_shape_vec((1, 3, 4, 4), clean).unwrap()).unwrap());
            let b = residue_channel(&RgbImage::new(Array4::from_shape_vec((1, 3, 4, 4), rainy).unwrap()).unwrap());
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
        }

        #[test]
        fn gray_is_zero_and_permutation_invariant(px in rgb_pixels(9)) {
            let gray: Vec<f32> = (0..3).flat_map(|_| px.iter().map(|p| p[0])).collect();
            let g = residue_channel(&RgbImage::new(Array4::from_shape_vec((1, 3, 3, 3), gray).unwrap()).unwrap());
            prop_assert!(g.data().iter().all(|&v| v == 0.0));
            let orig: Vec<f32> = (0..3).flat_map(|c| px.iter().map(move |p| p[c])).collect();
            let perm: Vec<f32> = [2usize, 0, 1].iter().flat_map(|&c| px.iter().map(move |p| p[c])).collect();
            let a = residue_channel(&RgbImage::new(Array4::from_shape_vec((1, 3, 3, 3), orig).unwrap()).unwrap());
            let b = residue_channel(&RgbImage::new(Array4::from_shape_vec((1, 3, 3, 3), perm).unwrap()).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
