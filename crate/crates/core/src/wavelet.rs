//! Single-level orthonormal 2-D Haar transform.
//!
//! `dwt2` maps `(B, C, H, W)` to `(B, 4C, H/2, W/2)`. The output channels are
//! four contiguous blocks `[LL | HL | LH | HH]`, each holding all `C` input
//! channels in order, so subband `q` of input channel `c` lives at channel
//! `q * C + c`. Checkpoints depend on this layout.
//!
//! For each 2x2 block with pixels `a b / c d`:
//!
//! ```text
//! LL = ( a + b + c + d) / 2
//! HL = (-a + b - c + d) / 2
//! LH = (-a - b + c + d) / 2
//! HH = ( a - b - c + d) / 2
//! ```
//!
//! The matrix is orthogonal and symmetric up to transpose, so `iwt2` is both
//! the inverse and the adjoint of `dwt2`.

use ndarray::Array4;

use crate::error::{shape_err, Result};
use crate::tensor::Real;

pub fn dwt2<T: Real>(x: &Array4<T>) -> Result<Array4<T>> {
    let (b, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("dwt2 needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let half = T::lit(0.5);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((b, 4 * c, oh, ow));
    let os = out.as_slice_mut().expect("fresh array");
    let plane = oh * ow;
    for n in 0..b {
        for ch in 0..c {
            let src = &xs[(n * c + ch) * h * w..][..h * w];
            let base = n * 4 * c * plane;
            for i in 0..oh {
                let r0 = &src[2 * i * w..][..w];
                let r1 = &src[(2 * i + 1) * w..][..w];
                for j in 0..ow {
                    let (a, bb) = (r0[2 * j], r0[2 * j + 1]);
                    let (cc, d) = (r1[2 * j], r1[2 * j + 1]);
                    let o = i * ow + j;
                    os[base + ch * plane + o] = (a + bb + cc + d) * half;
                    os[base + (c + ch) * plane + o] = (bb - a + d - cc) * half;
                    os[base + (2 * c + ch) * plane + o] = (cc + d - a - bb) * half;
                    os[base + (3 * c + ch) * plane + o] = (a - bb - cc + d) * half;
                }
            }
        }
    }
    Ok(out)
}

pub fn iwt2<T: Real>(y: &Array4<T>) -> Result<Array4<T>> {
    let (b, c4, oh, ow) = y.dim();
    if c4 % 4 != 0 {
        return shape_err(format!("iwt2 needs a channel count divisible by 4, got {c4}"));
    }
    let c = c4 / 4;
    let (h, w) = (2 * oh, 2 * ow);
    let half = T::lit(0.5);
    let y = y.as_standard_layout();
    let ys = y.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((b, c, h, w));
    let os = out.as_slice_mut().expect("fresh array");
    let plane = oh * ow;
    for n in 0..b {
        let base = n * c4 * plane;
        for ch in 0..c {
            let ll = &ys[base + ch * plane..][..plane];
            let hl = &ys[base + (c + ch) * plane..][..plane];
            let lh = &ys[base + (2 * c + ch) * plane..][..plane];
            let hh = &ys[base + (3 * c + ch) * plane..][..plane];
            let dst = &mut os[(n * c + ch) * h * w..][..h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let o = i * ow + j;
                    let (s0, s1, s2, s3) = (ll[o], hl[o], lh[o], hh[o]);
                    dst[2 * i * w + 2 * j] = (s0 - s1 - s2 + s3) * half;
                    dst[2 * i * w + 2 * j + 1] = (s0 + s1 - s2 - s3) * half;
                    dst[(2 * i + 1) * w + 2 * j] = (s0 - s1 + s2 - s3) * half;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (s0 + s1 + s2 + s3) * half;
                }
            }
        }
    }
    Ok(out)
}
