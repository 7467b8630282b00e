//! Minimal reverse-mode automatic differentiation over rank-4 arrays.
//!
//! A [`Var`] is an immutable node in a dynamically built graph. Results of
//! operations on vars that do not require gradients are plain constants and
//! keep no reference to their inputs, so inference holds only live values.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array4, Axis, Zip};

use crate::conv;
use crate::error::{shape_err, Result};
use crate::rcp::residue_with_extrema;
use crate::tensor::Real;
use crate::wavelet::{dwt2, iwt2};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

enum Op<T: Real> {
    Leaf,
    Conv2d { input: Var<T>, weight: Var<T>, bias: Option<Var<T>> },
    Add(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Scale(Var<T>, T),
    Relu(Var<T>),
    Sigmoid(Var<T>),
    GlobalAvgPool(Var<T>),
    ChannelGate { input: Var<T>, gate: Var<T> },
    Concat(Vec<Var<T>>),
    Dwt(Var<T>),
    Iwt(Var<T>),
    Residue { input: Var<T>, extrema: Vec<(u8, u8)> },
    Clamp { input: Var<T>, lo: T, hi: T },
    Sum(Var<T>),
    Mse { input: Var<T>, target: Array4<T> },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias } => {
                let mut v = vec![input, weight];
                v.extend(bias.iter());
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::ChannelGate { input, gate } => vec![input, gate],
            Op::Concat(parts) => parts.iter().collect(),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::GlobalAvgPool(x)
            | Op::Dwt(x)
            | Op::Iwt(x)
            | Op::Sum(x)
            | Op::Residue { input: x, .. }
            | Op::Clamp { input: x, .. }
            | Op::Mse { input: x, .. } => vec![x],
        }
    }
}

struct Node<T: Real> {
    id: u64,
    value: Array4<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Handle to a value in the autodiff graph. Cloning is cheap.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("dim", &self.dim())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn same_shape<T: Real>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(())
}

impl<T: Real> Var<T> {
    fn leaf(value: Array4<T>, requires_grad: bool) -> Self {
        Self(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op: Op::Leaf,
        }))
    }

    pub fn constant(value: Array4<T>) -> Self {
        Self::leaf(value, false)
    }

    /// Leaf that collects a gradient during [`Var::backward`].
    pub fn parameter(value: Array4<T>) -> Self {
        Self::leaf(value, true)
    }

    fn from_op(value: Array4<T>, op: Op<T>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        Self(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        }))
    }

    pub fn value(&self) -> &Array4<T> {
        &self.0.value
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.value.dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same-padded stride-1 convolution; `bias` has shape `(1, Co, 1, 1)`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let value = conv::conv2d(self.value(), weight.value(), bias.map(|b| b.value()))?;
        Ok(Self::from_op(
            value,
            Op::Conv2d { input: self.clone(), weight: weight.clone(), bias: bias.cloned() },
        ))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("add", self, other)?;
        Ok(Self::from_op(self.value() + other.value(), Op::Add(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", self, other)?;
        Ok(Self::from_op(self.value() * other.value(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: T) -> Var<T> {
        Self::from_op(self.value() * factor, Op::Scale(self.clone(), factor))
    }

    pub fn relu(&self) -> Var<T> {
        Self::from_op(self.value().mapv(|v| v.max(T::zero())), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Var<T> {
        Self::from_op(self.value().mapv(sigmoid), Op::Sigmoid(self.clone()))
    }

    /// Spatial mean, `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(&self) -> Var<T> {
        let (b, c, h, w) = self.dim();
        let n = T::from_usize(h * w).expect("pixel count");
        let mut out = Array4::zeros((b, c, 1, 1));
        for i in 0..b {
            for j in 0..c {
                out[[i, j, 0, 0]] = self.value().slice(s![i, j, .., ..]).sum() / n;
            }
        }
        Self::from_op(out, Op::GlobalAvgPool(self.clone()))
    }

    /// Multiplies every channel by a per-(batch, channel) scalar from `gate`.
    pub fn channel_gate(&self, gate: &Var<T>) -> Result<Var<T>> {
        let (b, c, _, _) = self.dim();
        if gate.dim() != (b, c, 1, 1) {
            return shape_err(format!("channel gate {:?} for input {:?}", gate.dim(), self.dim()));
        }
        let value = self.value() * gate.value();
        Ok(Self::from_op(value, Op::ChannelGate { input: self.clone(), gate: gate.clone() }))
    }

    /// Concatenates along the channel axis.
    pub fn concat(parts: &[Var<T>]) -> Result<Var<T>> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let (b, _, h, w) = parts[0].dim();
        if let Some(p) = parts.iter().find(|p| {
            let (pb, _, ph, pw) = p.dim();
            (pb, ph, pw) != (b, h, w)
        }) {
            return shape_err(format!("concat {:?} with {:?}", parts[0].dim(), p.dim()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = concatenate(Axis(1), &views).expect("checked shapes");
        Ok(Self::from_op(value.as_standard_layout().into_owned(), Op::Concat(parts.to_vec())))
    }

    pub fn dwt2(&self) -> Result<Var<T>> {
        Ok(Self::from_op(dwt2(self.value())?, Op::Dwt(self.clone())))
    }

    pub fn iwt2(&self) -> Result<Var<T>> {
        Ok(Self::from_op(iwt2(self.value())?, Op::Iwt(self.clone())))
    }

    /// Per-pixel channel max minus channel min of a 3-channel input.
    pub fn residue_channel(&self) -> Result<Var<T>> {
        let (value, extrema) = residue_with_extrema(self.value())?;
        Ok(Self::from_op(value, Op::Residue { input: self.clone(), extrema }))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        Self::from_op(self.value().mapv(|v| v.max(lo).min(hi)), Op::Clamp { input: self.clone(), lo, hi })
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&self) -> Var<T> {
        Self::from_op(Array4::from_elem((1, 1, 1, 1), self.value().sum()), Op::Sum(self.clone()))
    }

    /// Mean squared error against a constant target, as a `(1, 1, 1, 1)` scalar.
    pub fn mse(&self, target: &Array4<T>) -> Result<Var<T>> {
        if self.dim() != target.dim() {
            return shape_err(format!("mse: {:?} vs target {:?}", self.dim(), target.dim()));
        }
        let n = T::from_usize(target.len()).expect("element count");
        let sq: T = Zip::from(self.value())
            .and(target)
            .fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
        Ok(Self::from_op(
            Array4::from_elem((1, 1, 1, 1), sq / n),
            Op::Mse { input: self.clone(), target: target.clone() },
        ))
    }

    /// The single element of a scalar var.
    pub fn item(&self) -> T {
        self.value().iter().next().copied().unwrap_or_else(T::nan)
    }

    /// Back-propagates from this scalar and returns gradients of every leaf
    /// that requires one.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.dim()));
        }
        let order = self.topological_order();
        let mut pending: HashMap<u64, Array4<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        if self.0.requires_grad {
            pending.insert(self.0.id, Array4::ones(self.dim()));
        }
        for var in order.iter().rev() {
            let Some(grad) = pending.remove(&var.0.id) else { continue };
            if let Op::Leaf = var.0.op {
                leaves.insert(var.0.id, grad);
            } else {
                var.propagate(&grad, &mut pending)?;
            }
        }
        Ok(Gradients { grads: leaves })
    }

    /// Post-order over nodes that require gradients (inputs before outputs).
    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !var.0.requires_grad || !seen.insert(var.0.id) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in var.0.op.parents().into_iter().rev() {
                if p.0.requires_grad && !seen.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, grad: &Array4<T>, pending: &mut HashMap<u64, Array4<T>>) -> Result<()> {
        let mut send = |v: &Var<T>, g: Array4<T>| {
            if v.0.requires_grad {
                match pending.get_mut(&v.0.id) {
                    Some(acc) => *acc += &g,
                    None => {
                        pending.insert(v.0.id, g);
                    }
                }
            }
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias } => {
                let g = conv::conv2d_backward(input.value(), weight.value(), grad, input.0.requires_grad)?;
                if let Some(gi) = g.input {
                    send(input, gi);
                }
                send(weight, g.weight);
                if let Some(b) = bias {
                    send(b, g.bias);
                }
            }
            Op::Add(a, b) => {
                send(a, grad.clone());
                send(b, grad.clone());
            }
            Op::Mul(a, b) => {
                if a.0.requires_grad {
                    send(a, grad * b.value());
                }
                if b.0.requires_grad {
                    send(b, grad * a.value());
                }
            }
            Op::Scale(x, f) => send(x, grad * *f),
            Op::Relu(x) => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(x.value()).for_each(|g, &v| {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                });
                send(x, g);
            }
            Op::Sigmoid(x) => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(self.value()).for_each(|g, &y| *g *= y * (T::one() - y));
                send(x, g);
            }
            Op::GlobalAvgPool(x) => {
                let (b, c, h, w) = x.dim();
                let n = T::from_usize(h * w).expect("pixel count");
                let mut g = Array4::zeros((b, c, h, w));
                for i in 0..b {
                    for j in 0..c {
                        g.slice_mut(s![i, j, .., ..]).fill(grad[[i, j, 0, 0]] / n);
                    }
                }
                send(x, g);
            }
            Op::ChannelGate { input, gate } => {
                if input.0.requires_grad {
                    send(input, grad * gate.value());
                }
                if gate.0.requires_grad {
                    let (b, c, _, _) = input.dim();
                    let mut gg = Array4::zeros((b, c, 1, 1));
                    for i in 0..b {
                        for j in 0..c {
                            gg[[i, j, 0, 0]] = Zip::from(grad.slice(s![i, j, .., ..]))
                                .and(input.value().slice(s![i, j, .., ..]))
                                .fold(T::zero(), |acc, &g, &x| acc + g * x);
                        }
                    }
                    send(gate, gg);
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = p.dim().1;
                    if p.0.requires_grad {
                        send(p, grad.slice(s![.., start..start + c, .., ..]).to_owned());
                    }
                    start += c;
                }
            }
            Op::Dwt(x) => send(x, iwt2(grad)?),
            Op::Iwt(x) => send(x, dwt2(grad)?),
            Op::Residue { input, extrema } => {
                let (b, _, h, w) = input.dim();
                let mut g = Array4::zeros((b, 3, h, w));
                let mut k = 0;
                for n in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let (hi, lo) = extrema[k];
                            let v = grad[[n, 0, y, xx]];
                            g[[n, hi as usize, y, xx]] += v;
                            g[[n, lo as usize, y, xx]] -= v;
                            k += 1;
                        }
                    }
                }
                send(input, g);
            }
            Op::Clamp { input, lo, hi } => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(input.value()).for_each(|g, &v| {
                    if v < *lo || v > *hi {
                        *g = T::zero();
                    }
                });
                send(input, g);
            }
            Op::Sum(x) => send(x, Array4::from_elem(x.dim(), grad[[0, 0, 0, 0]])),
            Op::Mse { input, target } => {
                let n = T::from_usize(target.len()).expect("element count");
                let k = grad[[0, 0, 0, 0]] * T::lit(2.0) / n;
                let mut g = input.value() - target;
                g.mapv_inplace(|v| v * k);
                send(input, g);
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Gradients<T: Real> {
    grads: HashMap<u64, Array4<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Array4<T>> {
        self.grads.get(&var.0.id)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Array4<T>> {
        self.grads.remove(&var.0.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        Array::from_shape_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 10_000) as f64 / 5_000.0 - 1.0
        })
    }

    /// Central-difference check of d(loss)/d(leaf) for every element.
    fn check(leaves: &[Array4<f64>], f: impl Fn(&[Var<f64>]) -> Var<f64>) {
        let vars: Vec<_> = leaves.iter().cloned().map(Var::parameter).collect();
        let grads = f(&vars).backward().unwrap();
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(&vars[li]).unwrap();
            for idx in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut vs: Vec<_> = leaves.iter().cloned().map(Var::constant).collect();
                    let mut a = leaf.clone();
                    a.as_slice_mut().unwrap()[idx] += delta;
                    vs[li] = Var::constant(a);
                    f(&vs).item()
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[idx];
                let tol = 1e-5 * num.abs().max(an.abs()) + 1e-8;
                assert!((num - an).abs() <= tol, "leaf {li} idx {idx}: {an} vs {num}");
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let a = rand((2, 3, 4, 4), 1);
        let b = rand((2, 3, 4, 4), 2);
        check(&[a.clone(), b.clone()], |v| v[0].mul(&v[1]).unwrap().sigmoid().add(&v[0].scale(0.3)).unwrap().sum());
        check(&[a.clone()], |v| v[0].relu().clamp(-0.5, 0.4).sum());
        check(&[a, b.clone()], |v| v[0].mse(&b.mapv(|x| x * 0.5)).unwrap().add(&v[1].relu().sum()).unwrap());
    }

    #[test]
    fn structural_ops() {
        let x = rand((2, 4, 4, 6), 3);
        let g = rand((2, 4, 1, 1), 4);
        let wts = rand((2, 4, 4, 6), 5);
        let wp = rand((2, 4, 1, 1), 14);
        check(&[x.clone(), g], |v| {
            let gated = v[0].channel_gate(&v[1].sigmoid()).unwrap();
            let pooled = v[0].global_avg_pool().channel_gate(&v[1]).unwrap();
            let a = gated.mul(&Var::constant(wts.clone())).unwrap().sum();
            a.add(&pooled.mul(&Var::constant(wp.clone())).unwrap().sum()).unwrap()
        });
        let wcat = rand((2, 8, 4, 6), 6);
        check(&[x.clone()], |v| Var::concat(&[v[0].clone(), v[0].scale(2.0)]).unwrap().mul(&Var::constant(wcat.clone())).unwrap().sum());
        let wd = rand((2, 16, 2, 3), 7);
        check(&[x.clone()], |v| v[0].dwt2().unwrap().mul(&Var::constant(wd.clone())).unwrap().sum());
        let wi = rand((2, 1, 8, 12), 8);
        check(&[x], |v| v[0].iwt2().unwrap().mul(&Var::constant(wi.clone())).unwrap().sum());
    }

    #[test]
    fn conv_and_residue() {
        let x = rand((2, 3, 5, 4), 9);
        let w = rand((2, 3, 3, 3), 10);
        let b = rand((1, 2, 1, 1), 11);
        let wo = rand((2, 2, 5, 4), 12);
        check(&[x.clone(), w, b], |v| v[0].conv2d(&v[1], Some(&v[2])).unwrap().mul(&Var::constant(wo.clone())).unwrap().sum());
        let wr = rand((2, 1, 5, 4), 13);
        check(&[x], |v| v[0].residue_channel().unwrap().mul(&Var::constant(wr.clone())).unwrap().sum());
    }

    #[test]
    fn constants_do_not_track() {
        let a = Var::constant(Array4::<f32>::ones((1, 1, 2, 2)));
        let b = a.relu().scale(2.0);
        assert!(!b.requires_grad());
        let g = b.sum().backward().unwrap();
        assert!(g.get(&a).is_none());
    }

    #[test]
    fn shape_errors() {
        let a = Var::constant(Array4::<f32>::ones((1, 1, 2, 2)));
        let b = Var::constant(Array4::<f32>::ones((1, 2, 2, 2)));
        assert!(a.add(&b).is_err());
        assert!(a.backward().is_err());
        assert!(a.channel_gate(&b).is_err());
    }
}
