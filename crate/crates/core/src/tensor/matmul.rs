//! Matrix multiplication over the trailing two axes, with broadcasting on
//! leading batch dimensions.

use crate::error::{Error, Result};
use crate::tensor::shape::{bcast_strides, broadcast_shape};
use crate::tensor::{Real, Tensor};

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if n == 1 {
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + row[p] * b[p];
            }
            c[i] = c[i] + acc;
        }
        return;
    }
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = row[p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out[j] = out[j] + av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (rows of b are dotted against rows of a)
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[j] = out[j] + acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] = out[j] + av * brow[j];
            }
        }
    }
}

/// Iterates flat offsets of (out, a, b) matrices over broadcast batch dims.
fn for_each_batch(
    batch_shape: &[usize],
    a_batch: &[usize],
    b_batch: &[usize],
    a_mat: usize,
    b_mat: usize,
    o_mat: usize,
    mut visit: impl FnMut(usize, usize, usize),
) {
    let count: usize = batch_shape.iter().product();
    if batch_shape.is_empty() {
        visit(0, 0, 0);
        return;
    }
    let rank = batch_shape.len();
    let sa = bcast_strides(a_batch, batch_shape);
    let sb = bcast_strides(b_batch, batch_shape);
    let mut index = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for out_i in 0..count {
        visit(out_i * o_mat, ai * a_mat, bi * b_mat);
        for d in (0..rank).rev() {
            index[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if index[d] < batch_shape[d] {
                break;
            }
            ai -= sa[d] * batch_shape[d];
            bi -= sb[d] * batch_shape[d];
            index[d] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Matrix product over the trailing two axes. Leading axes broadcast,
    /// so `[b, m, k] x [k, n]` and `[1, g, m, k] x [h, 1, k, n]` both work.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul".to_string(),
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (ash, bsh) = (self.shape(), other.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let batch_shape = broadcast_shape(a_batch, b_batch).ok_or_else(mismatch)?;
        let k = ka;
        let mut out_shape = batch_shape.clone();
        out_shape.extend_from_slice(&[m, n]);

        let mut out = vec![T::zero(); out_shape.iter().product()];
        {
            let a = self.data();
            let b = other.data();
            for_each_batch(&batch_shape, a_batch, b_batch, m * k, k * n, m * n, |o, ai, bi| {
                gemm_nn(&a[ai..ai + m * k], &b[bi..bi + k * n], &mut out[o..o + m * n], m, k, n);
            });
        }
        let a_batch = a_batch.to_vec();
        let b_batch = b_batch.to_vec();
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
                for_each_batch(&batch_shape, &a_batch, &b_batch, m * k, k * n, m * n, |o, ai, bi| {
                    let gs = &g[o..o + m * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA = g * B^T
                        gemm_nt(gs, &b[bi..bi + k * n], &mut ga[ai..ai + m * k], m, n, k);
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = A^T * g
                        gemm_tn(&a[ai..ai + m * k], gs, &mut gb[bi..bi + k * n], m, k, n);
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
}
