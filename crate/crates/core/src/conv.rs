//! Stride-1 "same" 2-D convolution kernels (odd square kernels, zero padding
//! of `k / 2`), lowered to GEMM through an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis};

use crate::error::{shape_err, Result};
use crate::tensor::Real;

fn check(x: &Array4<impl Real>, w: &Array4<impl Real>) -> Result<()> {
    let (_, ci, _, _) = x.dim();
    let (_, wci, kh, kw) = w.dim();
    if wci != ci {
        return shape_err(format!(
            "conv expects {wci} input channels, got {ci}"
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err(format!("conv kernel must be odd and square, got {kh}x{kw}"));
    }
    Ok(())
}

/// Fills `col` (`ci*k*k` rows, `h*w` columns) with shifted copies of `src`.
fn im2col<T: Real>(src: &[T], ci: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        let plane = &src[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        line.fill(T::zero());
                        continue;
                    }
                    let base = sy as usize * w;
                    line[..x0].fill(T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    line[x0..x1].copy_from_slice(&plane[base + sx0..base + sx0 + (x1 - x0)]);
                    line[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `col` back into `dst`.
fn col2im_add<T: Real>(col: &[T], ci: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dst[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    let out = &mut plane[base + sx0..base + sx0 + (x1 - x0)];
                    for (o, v) in out.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *o += *v;
                    }
                }
            }
        }
    }
}

fn weight_matrix<T: Real>(w: &Array4<T>) -> ArrayView2<'_, T> {
    let (co, ci, k, _) = w.dim();
    w.view()
        .into_shape_with_order((co, ci * k * k))
        .expect("standard layout weight")
}

pub fn conv2d<T: Real>(x: &Array4<T>, w: &Array4<T>, bias: Option<&Array4<T>>) -> Result<Array4<T>> {
    check(x, w)?;
    let (b, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let hw = h * wd;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let wm = weight_matrix(w);
    let mut out = Array4::<T>::zeros((b, co, h, wd));
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ci * k * k * hw] };
    for n in 0..b {
        let src = &xs[n * ci * hw..(n + 1) * ci * hw];
        let cm = if k == 1 {
            ArrayView2::from_shape((ci, hw), src).expect("shape")
        } else {
            im2col(src, ci, h, wd, k, &mut col);
            ArrayView2::from_shape((ci * k * k, hw), &col[..]).expect("shape")
        };
        let mut om = out
            .index_axis_mut(Axis(0), n)
            .into_shape_with_order((co, hw))
            .expect("standard layout output");
        general_mat_mul(T::one(), &wm, &cm, T::zero(), &mut om);
        if let Some(bias) = bias {
            for (o, row) in om.outer_iter_mut().enumerate() {
                let bv = bias[[0, o, 0, 0]];
                let mut row = row;
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Array4<T>>,
    pub weight: Array4<T>,
    pub bias: Array4<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    grad_out: &Array4<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    check(x, w)?;
    let (b, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    if grad_out.dim() != (b, co, h, wd) {
        return shape_err("conv gradient shape mismatch");
    }
    let hw = h * wd;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let g = grad_out.as_standard_layout();
    let wm = weight_matrix(w);
    let mut gw = Array2::<T>::zeros((co, ci * k * k));
    let mut gb = Array4::<T>::zeros((1, co, 1, 1));
    let mut gx = need_input.then(|| Array4::<T>::zeros((b, ci, h, wd)));
    let mut col = vec![T::zero(); if k == 1 { 0 } else { ci * k * k * hw }];
    let mut gcol = Array2::<T>::zeros(if need_input && k > 1 { (ci * k * k, hw) } else { (0, 0) });
    for n in 0..b {
        let gm = g
            .index_axis(Axis(0), n)
            .into_shape_with_order((co, hw))
            .expect("standard layout");
        for (o, row) in gm.outer_iter().enumerate() {
            gb[[0, o, 0, 0]] += row.sum();
        }
        let src = &xs[n * ci * hw..(n + 1) * ci * hw];
        let cm = if k == 1 {
            ArrayView2::from_shape((ci, hw), src).expect("shape")
        } else {
            im2col(src, ci, h, wd, k, &mut col);
            ArrayView2::from_shape((ci * k * k, hw), &col[..]).expect("shape")
        };
        general_mat_mul(T::one(), &gm, &cm.t(), T::one(), &mut gw);
        if let Some(gx) = gx.as_mut() {
            let mut dst = gx.index_axis_mut(Axis(0), n);
            if k == 1 {
                let mut dm = dst.into_shape_with_order((ci, hw)).expect("standard layout");
                general_mat_mul(T::one(), &wm.t(), &gm, T::zero(), &mut dm);
            } else {
                general_mat_mul(T::one(), &wm.t(), &gm, T::zero(), &mut gcol);
                let ds = dst.as_slice_mut().expect("standard layout");
                col2im_add(gcol.as_slice().expect("standard layout"), ci, h, wd, k, ds);
            }
        }
    }
    let weight = gw.into_shape_with_order((co, ci, k, k)).expect("shape");
    Ok(ConvGrads { input: gx, weight, bias: gb })
}
