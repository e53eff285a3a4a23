//! 2D convolution (valid padding, cross-correlation) via im2col GEMM, and
//! batch normalization with running statistics.

use crate::error::{Error, Result};
use crate::tensor::matmul::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Real, Tensor};

/// col[(c*kh*kw + ky*kw + kx), (oy*ow + ox)] = input[c, oy*stride+ky, ox*stride+kx]
fn im2col<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let positions = oh * ow;
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh * kw + ky * kw + kx) * positions;
                for oy in 0..oh {
                    let src = (oy * stride + ky) * w + kx;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        col[dst + ox] = plane[src + ox * stride];
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back onto the input plane.
fn col2im_add<T: Real>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    input_grad: &mut [T],
) {
    let positions = oh * ow;
    for c in 0..cin {
        let plane = &mut input_grad[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh * kw + ky * kw + kx) * positions;
                for oy in 0..oh {
                    let dst = (oy * stride + ky) * w + kx;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let idx = dst + ox * stride;
                        plane[idx] = plane[idx] + col[src + ox];
                    }
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Valid-padding cross-correlation of `[b, cin, h, w]` with kernels
    /// `[cout, cin, kh, kw]`, differentiable in both input and kernel.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d".to_string(),
            lhs: self.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        };
        if self.rank() != 4 || kernel.rank() != 4 || self.shape()[1] != kernel.shape()[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be positive".to_string()));
        }
        let (batch, cin, h, w) = dims4(self.shape());
        let (cout, _, kh, kw) = dims4(kernel.shape());
        if kh > h || kw > w {
            return Err(Error::KernelTooLarge { input: (h, w), kernel: (kh, kw) });
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let positions = oh * ow;
        let k2 = cin * kh * kw;

        let mut out = vec![T::zero(); batch * cout * positions];
        let mut col = vec![T::zero(); k2 * positions];
        {
            let x = self.data();
            let kern = kernel.data();
            for s in 0..batch {
                im2col(&x[s * cin * h * w..], cin, h, w, kh, kw, stride, oh, ow, &mut col);
                gemm_nn(
                    &kern,
                    &col,
                    &mut out[s * cout * positions..(s + 1) * cout * positions],
                    cout,
                    k2,
                    positions,
                );
            }
        }
        Ok(Tensor::from_op(
            vec![batch, cout, oh, ow],
            out,
            vec![self.clone(), kernel.clone()],
            move |g, parents| {
                let need_x = parents[0].requires_grad();
                let need_k = parents[1].requires_grad();
                let x = parents[0].data();
                let kern = parents[1].data();
                let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
                let mut gk = need_k.then(|| vec![T::zero(); kern.len()]);
                // The column matrix is recomputed per sample rather than
                // saved; it is the largest intermediate by far.
                let mut col = vec![T::zero(); k2 * positions];
                let mut dcol = vec![T::zero(); k2 * positions];
                for s in 0..batch {
                    let gs = &g[s * cout * positions..(s + 1) * cout * positions];
                    if let Some(gk) = gk.as_mut() {
                        im2col(&x[s * cin * h * w..], cin, h, w, kh, kw, stride, oh, ow, &mut col);
                        gemm_nt(gs, &col, gk, cout, positions, k2);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dcol.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(&kern, gs, &mut dcol, cout, k2, positions);
                        col2im_add(
                            &dcol,
                            cin,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            oh,
                            ow,
                            &mut gx[s * cin * h * w..(s + 1) * cin * h * w],
                        );
                    }
                }
                drop(x);
                drop(kern);
                if let Some(gx) = gx {
                    parents[0].accumulate_grad(&gx);
                }
                if let Some(gk) = gk {
                    parents[1].accumulate_grad(&gk);
                }
            },
        ))
    }

    /// Batch normalization over the channel axis (axis 1) of a `[b, c, h, w]`
    /// or `[b, c]` tensor.
    ///
    /// Training mode normalizes with biased batch statistics and folds them
    /// into `running_mean` / `running_var` (in place, outside the gradient
    /// graph) as `r = momentum * r + (1 - momentum) * batch`. Eval mode
    /// normalizes with the running statistics. Differentiable with respect
    /// to the input, `gamma`, and `beta`.
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Tensor<T>> {
        if self.rank() != 2 && self.rank() != 4 {
            return Err(Error::InvalidConfig(format!(
                "batch_norm expects rank 2 or 4 input, got shape {:?}",
                self.shape()
            )));
        }
        let channels = self.shape()[1];
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.numel() != channels {
                return Err(Error::ShapeMismatch {
                    op: format!("batch_norm {name}"),
                    lhs: vec![channels],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let batch = self.shape()[0];
        if train && batch < 2 {
            return Err(Error::DegenerateBatch);
        }
        let spatial: usize = self.shape()[2..].iter().product();
        let per_channel = batch * spatial;
        let x = self.data();

        let (mean, var) = if train {
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            for s in 0..batch {
                for c in 0..channels {
                    let base = (s * channels + c) * spatial;
                    let mut acc = T::zero();
                    for i in 0..spatial {
                        acc = acc + x[base + i];
                    }
                    mean[c] = mean[c] + acc;
                }
            }
            let inv_n = T::c(1.0 / per_channel as f64);
            for m in &mut mean {
                *m = *m * inv_n;
            }
            for s in 0..batch {
                for c in 0..channels {
                    let base = (s * channels + c) * spatial;
                    let mut acc = T::zero();
                    for i in 0..spatial {
                        let d = x[base + i] - mean[c];
                        acc = acc + d * d;
                    }
                    var[c] = var[c] + acc;
                }
            }
            for v in &mut var {
                *v = *v * inv_n;
            }
            // Fold into the running estimates used by eval mode.
            let mom = T::c(momentum);
            let rest = T::one() - mom;
            running_mean.update_data(|r| {
                for (r, &m) in r.iter_mut().zip(&mean) {
                    *r = mom * *r + rest * m;
                }
            });
            running_var.update_data(|r| {
                for (r, &v) in r.iter_mut().zip(&var) {
                    *r = mom * *r + rest * v;
                }
            });
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let eps_t = T::c(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let g = gamma.data();
        let b = beta.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..batch {
            for c in 0..channels {
                let base = (s * channels + c) * spatial;
                for i in 0..spatial {
                    let xh = (x[base + i] - mean[c]) * inv_std[c];
                    xhat[base + i] = xh;
                    out[base + i] = g[c] * xh + b[c];
                }
            }
        }
        drop(x);
        drop(g);
        drop(b);

        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |gout, parents| {
                let need_x = parents[0].requires_grad();
                let need_g = parents[1].requires_grad();
                let need_b = parents[2].requires_grad();
                let gamma = parents[1].data();

                // Per-channel sums of g and g*xhat drive every term.
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gx = vec![T::zero(); channels];
                for s in 0..batch {
                    for c in 0..channels {
                        let base = (s * channels + c) * spatial;
                        let mut a0 = T::zero();
                        let mut a1 = T::zero();
                        for i in 0..spatial {
                            a0 = a0 + gout[base + i];
                            a1 = a1 + gout[base + i] * xhat[base + i];
                        }
                        sum_g[c] = sum_g[c] + a0;
                        sum_gx[c] = sum_gx[c] + a1;
                    }
                }
                if need_x {
                    let mut gx = vec![T::zero(); xhat.len()];
                    let n = T::c(per_channel as f64);
                    for s in 0..batch {
                        for c in 0..channels {
                            let base = (s * channels + c) * spatial;
                            let scale = gamma[c] * inv_std[c];
                            if train {
                                let scale = scale / n;
                                for i in 0..spatial {
                                    gx[base + i] = scale
                                        * (n * gout[base + i]
                                            - sum_g[c]
                                            - xhat[base + i] * sum_gx[c]);
                                }
                            } else {
                                for i in 0..spatial {
                                    gx[base + i] = scale * gout[base + i];
                                }
                            }
                        }
                    }
                    parents[0].accumulate_grad(&gx);
                }
                drop(gamma);
                if need_g {
                    parents[1].accumulate_grad(&sum_gx);
                }
                if need_b {
                    parents[2].accumulate_grad(&sum_g);
                }
            },
        ))
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}
