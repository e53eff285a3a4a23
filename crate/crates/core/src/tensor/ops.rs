//! Differentiable tensor operations: broadcast elementwise arithmetic,
//! reductions, softmax, L2 norms, and shape manipulation.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::shape::{self, for_each_bcast2, lanes, strides};
use crate::tensor::{Real, Tensor};

impl<T: Real> Tensor<T> {
    fn binary(
        &self,
        name: &'static str,
        other: &Tensor<T>,
        forward: impl Fn(T, T) -> T,
        grad_a: impl Fn(T, T, T) -> T + 'static,
        grad_b: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Tensor<T>> {
        let out_shape =
            shape::broadcast_shape(self.shape(), other.shape()).ok_or(Error::ShapeMismatch {
                op: name.to_string(),
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })?;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        {
            let a = self.data();
            let b = other.data();
            for_each_bcast2(&out_shape, self.shape(), other.shape(), |o, ai, bi| {
                out[o] = forward(a[ai], b[bi]);
            });
        }
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let o_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            move |g, parents| {
                let need_a = parents[0].requires_grad();
                let need_b = parents[1].requires_grad();
                let a = parents[0].data();
                let b = parents[1].data();
                let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
                let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
                for_each_bcast2(&o_shape, &a_shape, &b_shape, |o, ai, bi| {
                    let gv = g[o];
                    if let Some(ga) = ga.as_mut() {
                        ga[ai] = ga[ai] + grad_a(gv, a[ai], b[bi]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bi] = gb[bi] + grad_b(gv, a[ai], b[bi]);
                    }
                });
                drop(a);
                drop(b);
                if let Some(ga) = ga {
                    parents[0].accumulate_grad(&ga);
                }
                if let Some(gb) = gb {
                    parents[1].accumulate_grad(&gb);
                }
            },
        ))
    }

    /// Unary elementwise op; `derivative(x, y)` gets the input and output
    /// values of each element.
    fn unary(
        &self,
        forward: impl Fn(T) -> T,
        derivative: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| forward(x)).collect();
        let out = Rc::new(std::cell::RefCell::new(out));
        let saved = Rc::clone(&out);
        Tensor::from_op_shared(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, parents| {
                if !parents[0].requires_grad() {
                    return;
                }
                let x = parents[0].data();
                let y = saved.borrow();
                let gx: Vec<T> = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&gv, (&xv, &yv))| gv * derivative(xv, yv))
                    .collect();
                drop(x);
                parents[0].accumulate_grad(&gx);
            },
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("add", other, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("sub", other, |a, b| a - b, |g, _, _| g, |g, _, _| T::zero() - g)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary("mul", other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    /// Division; a zero divisor produces non-finite values detectable with
    /// [`Tensor::validate_finite`].
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            "div",
            other,
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| T::zero() - g * a / (b * b),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| T::zero() - x, |_, _| T::zero() - T::one())
    }

    pub fn cos(&self) -> Tensor<T> {
        self.unary(|x| x.cos(), |x, _| T::zero() - x.sin())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| T::c(2.0) * x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(|x| x.sqrt(), |_, y| T::one() / (T::c(2.0) * y))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// Elementwise maximum with a scalar; subgradient 0 at the tie point.
    pub fn max_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        self.unary(
            move |x| x.max(c),
            move |x, _| if x > c { T::one() } else { T::zero() },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.max_scalar(0.0)
    }

    /// Clamps into `[lo, hi]`; subgradient 1 inside the range (boundaries
    /// included), 0 outside.
    pub fn clip(&self, lo: f64, hi: f64) -> Tensor<T> {
        let lo = T::c(lo);
        let hi = T::c(hi);
        self.unary(
            move |x| x.min(hi).max(lo),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Numerically stabilized softmax along `axis`; outputs are positive and
    /// sum to 1 along the axis.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        let (outer, len, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(x[base + k * inner]);
                }
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (x[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    sum = sum + e;
                }
                for k in 0..len {
                    out[base + k * inner] = out[base + k * inner] / sum;
                }
            }
        }
        drop(x);
        let out = Rc::new(std::cell::RefCell::new(out));
        let saved = Rc::clone(&out);
        Ok(Tensor::from_op_shared(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, parents| {
                if !parents[0].requires_grad() {
                    return;
                }
                let y = saved.borrow();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            let idx = base + k * inner;
                            dot = dot + g[idx] * y[idx];
                        }
                        for k in 0..len {
                            let idx = base + k * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                drop(y);
                parents[0].accumulate_grad(&gx);
            },
        ))
    }

    pub fn reduce_sum(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        let (outer, len, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + x[base + i];
                }
            }
        }
        drop(x);
        let out_shape = reduced_shape(self.shape(), axis, keepdim);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g, parents| {
                if !parents[0].requires_grad() {
                    return;
                }
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            gx[base + i] = g[gbase + i];
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
            },
        ))
    }

    pub fn reduce_mean(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let len = *self.shape().get(axis).ok_or(Error::InvalidAxis {
            axis,
            rank: self.rank(),
        })?;
        Ok(self.reduce_sum(axis, keepdim)?.mul_scalar(1.0 / len as f64))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g, parents| {
            if !parents[0].requires_grad() {
                return;
            }
            parents[0].accumulate_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all().mul_scalar(1.0 / self.numel() as f64)
    }

    /// L2 norm along `axis`, keeping the axis with extent 1. The gradient is
    /// `x / norm`, defined as zero where the norm is zero.
    pub fn l2_norm(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        let (outer, len, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    let v = x[base + i];
                    out[obase + i] = out[obase + i] + v * v;
                }
            }
        }
        for v in &mut out {
            *v = v.sqrt();
        }
        drop(x);
        let out = Rc::new(std::cell::RefCell::new(out));
        let saved = Rc::clone(&out);
        let out_shape = reduced_shape(self.shape(), axis, true);
        Ok(Tensor::from_op_shared(
            out_shape,
            out,
            vec![self.clone()],
            move |g, parents| {
                if !parents[0].requires_grad() {
                    return;
                }
                let x = parents[0].data();
                let norms = saved.borrow();
                let mut gx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            let n = norms[obase + i];
                            if n > T::zero() {
                                gx[base + i] = g[obase + i] * x[base + i] / n;
                            }
                        }
                    }
                }
                drop(x);
                parents[0].accumulate_grad(&gx);
            },
        ))
    }

    /// Reinterprets the (row-major) data with a new shape of equal size.
    /// The buffer is shared, not copied.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let expected: usize = new_shape.iter().product();
        if new_shape.is_empty() || expected != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape".to_string(),
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        Ok(Tensor::from_op_shared(
            new_shape.to_vec(),
            self.buffer(),
            vec![self.clone()],
            move |g, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(g);
                }
            },
        ))
    }

    /// Permutes axes, materializing the result.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidConfig(format!(
                "permute axes {axes:?} are not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let in_strides = strides(self.shape());
        // stride in the input for each output axis
        let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let x = self.data();
        let n = x.len();
        let mut out = vec![T::zero(); n];
        let mut index = vec![0usize; rank];
        let mut src = 0usize;
        for item in out.iter_mut().take(n) {
            *item = x[src];
            for d in (0..rank).rev() {
                index[d] += 1;
                src += map_strides[d];
                if index[d] < out_shape[d] {
                    break;
                }
                src -= map_strides[d] * out_shape[d];
                index[d] = 0;
            }
        }
        drop(x);
        let o_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g, parents| {
                if !parents[0].requires_grad() {
                    return;
                }
                let mut gx = vec![T::zero(); n];
                let mut index = vec![0usize; rank];
                let mut src = 0usize;
                for &gv in g.iter().take(n) {
                    gx[src] = gx[src] + gv;
                    for d in (0..rank).rev() {
                        index[d] += 1;
                        src += map_strides[d];
                        if index[d] < o_shape[d] {
                            break;
                        }
                        src -= map_strides[d] * o_shape[d];
                        index[d] = 0;
                    }
                }
                parents[0].accumulate_grad(&gx);
            },
        ))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| {
            Error::InvalidConfig("concat requires at least one input".to_string())
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat".to_string(),
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(parts.len());
        for p in parts {
            let len = p.shape()[axis];
            let x = p.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
            }
            blocks.push((offset, len));
            offset += len;
        }
        let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(
            out_shape,
            out,
            parents,
            move |g, parents| {
                for (p, &(offset, len)) in parents.iter().zip(&blocks) {
                    if !p.requires_grad() {
                        continue;
                    }
                    let mut gp = vec![T::zero(); p.numel()];
                    for o in 0..outer {
                        let dst = o * len * inner;
                        let src = (o * axis_total + offset) * inner;
                        gp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    p.accumulate_grad(&gp);
                }
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        let full = self.shape()[axis];
        if len == 0 || start + len > full {
            return Err(Error::InvalidConfig(format!(
                "slice [{start}, {}) out of range for axis extent {full}",
                start + len
            )));
        }
        let (outer, _, inner) = lanes(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let x = self.data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
        }
        drop(x);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g, parents| {
                if !parents[0].requires_grad() {
                    return;
                }
                let mut gx = vec![T::zero(); parents[0].numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                parents[0].accumulate_grad(&gx);
            },
        ))
    }

}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else if out.len() == 1 {
        out = vec![1];
    } else {
        out.remove(axis);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn add_componentwise() {
        let y = t(&[2], &[1.0, 2.0]).add(&t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn cos_of_zero_is_one() {
        assert_eq!(t(&[1], &[0.0]).cos().to_vec(), vec![1.0]);
    }

    #[test]
    fn mul_broadcasts_trailing_dims() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let y = a.mul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), vec![10.0, 40.0, 90.0, 40.0, 100.0, 180.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[2, 3], &[0.0; 6]).add(&t(&[4], &[0.0; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn div_by_zero_is_detectable() {
        let y = t(&[2], &[1.0, 1.0]).div(&t(&[2], &[1.0, 0.0])).unwrap();
        assert!(y.validate_finite("div").is_err());
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let y = t(&[2], &[0.0, 0.0]).softmax(0).unwrap();
        assert_close(&y.to_vec(), &[0.5, 0.5], 1e-15);

        let y = t(&[2], &[1.0, 0.5]).softmax(0).unwrap();
        assert_close(&y.to_vec(), &[0.6224593312018545, 0.3775406687981454], 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t(&[3], &[0.3, -1.2, 2.0]);
        let shifted = x.add_scalar(7.5);
        let a = x.softmax(0).unwrap().to_vec();
        let b = shifted.softmax(0).unwrap().to_vec();
        assert_close(&a, &b, 1e-12);
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = t(&[3], &[5.0, -1.0, 2.0]).trainable();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_backward() {
        let x = t(&[2], &[1.0, 2.0]).trainable();
        x.square().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn l2_norm_values_and_zero_safeguard() {
        let x = t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]).trainable();
        let n = x.l2_norm(1).unwrap();
        assert_eq!(n.shape(), &[2, 1]);
        assert_close(&n.to_vec(), &[5.0, 0.0], 1e-15);
        n.sum_all().backward().unwrap();
        assert_close(&x.grad().unwrap(), &[0.6, 0.8, 0.0, 0.0], 1e-15);
    }

    #[test]
    fn clip_subgradient() {
        let x = t(&[3], &[-1.0, 0.5, 2.0]).trainable();
        let y = x.clip(0.0, 1.0);
        assert_eq!(y.to_vec(), vec![0.0, 0.5, 1.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn reshape_shares_data_and_routes_grads() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).trainable();
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        y.mul_scalar(2.0).sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 6]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = y.permute(&[1, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let y = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = y.slice_axis(1, 0, 2).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn reduce_sum_keepdim_shapes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.reduce_sum(1, true).unwrap().to_vec(), vec![6.0, 15.0]);
        assert_eq!(x.reduce_sum(0, false).unwrap().shape(), &[3]);
        assert_eq!(x.reduce_sum(0, false).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
    }
}
