//! Independent verification harnesses: a straight-line scalar routing
//! oracle and a central finite-difference gradient checker.
//!
//! The oracle in this module deliberately shares no code with the
//! `routing` module (or the tensor ops it is built on): everything here is
//! plain scalar loops over `f64` slices, so agreement between the two is a
//! meaningful check rather than a tautology.

use crate::error::{Error, Result};
use crate::routing::{RoutingAlgorithm, RoutingConfig};
use crate::tensor::Tensor;

/// Routing results in flat row-major layout: `logits`/`couplings` are
/// `[batch, n_lower, n_upper]`, `outputs` is `[batch, n_upper, dim]`.
pub struct OracleRouting {
    pub logits: Vec<f64>,
    pub couplings: Vec<f64>,
    pub outputs: Vec<f64>,
}

/// Transliteration of the iterative routing procedure as scalar loops.
///
/// `values` holds prediction vectors in `[batch, n_lower, n_upper, dim]`
/// layout. Intended for tiny instances used as ground truth.
pub fn routing_oracle(
    values: &[f64],
    batch: usize,
    n_lower: usize,
    n_upper: usize,
    dim: usize,
    config: &RoutingConfig,
) -> OracleRouting {
    assert_eq!(values.len(), batch * n_lower * n_upper * dim);
    assert!(config.iterations >= 1, "routing requires r >= 1");

    let pred = |s: usize, i: usize, j: usize, d: usize| {
        values[((s * n_lower + i) * n_upper + j) * dim + d]
    };
    let pred_norm = |s: usize, i: usize, j: usize| {
        let mut acc = 0.0;
        for d in 0..dim {
            acc += pred(s, i, j, d) * pred(s, i, j, d);
        }
        acc.sqrt()
    };

    let mut logits = vec![0.0; batch * n_lower * n_upper];
    if let RoutingAlgorithm::CognitiveConsistency = config.algorithm {
        for s in 0..batch {
            for i in 0..n_lower {
                for j in 0..n_upper {
                    let n = pred_norm(s, i, j);
                    logits[(s * n_lower + i) * n_upper + j] =
                        n.max(config.a_min).min(config.a_max);
                }
            }
        }
    }

    let mut couplings = vec![0.0; batch * n_lower * n_upper];
    let mut outputs = vec![0.0; batch * n_upper * dim];
    for _ in 0..config.iterations {
        // softmax over the upper-capsule axis
        for s in 0..batch {
            for i in 0..n_lower {
                let row = (s * n_lower + i) * n_upper;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n_upper {
                    max = max.max(logits[row + j]);
                }
                let mut sum = 0.0;
                for j in 0..n_upper {
                    couplings[row + j] = (logits[row + j] - max).exp();
                    sum += couplings[row + j];
                }
                for j in 0..n_upper {
                    couplings[row + j] /= sum;
                }
            }
        }
        // weighted sum over lower capsules, then squash
        for s in 0..batch {
            for j in 0..n_upper {
                let mut total = vec![0.0; dim];
                for i in 0..n_lower {
                    let c = couplings[(s * n_lower + i) * n_upper + j];
                    for (d, t) in total.iter_mut().enumerate() {
                        *t += c * pred(s, i, j, d);
                    }
                }
                let sq_norm: f64 = total.iter().map(|v| v * v).sum();
                let norm = sq_norm.sqrt();
                let factor = if norm > 0.0 { norm / (1.0 + sq_norm) } else { 0.0 };
                for d in 0..dim {
                    outputs[(s * n_upper + j) * dim + d] = total[d] * factor;
                }
            }
        }
        // logit update
        for s in 0..batch {
            for j in 0..n_upper {
                let mut v_sq = 0.0;
                for d in 0..dim {
                    let v = outputs[(s * n_upper + j) * dim + d];
                    v_sq += v * v;
                }
                let v_norm = v_sq.sqrt();
                for i in 0..n_lower {
                    let idx = (s * n_lower + i) * n_upper + j;
                    match config.algorithm {
                        RoutingAlgorithm::CognitiveConsistency => {
                            let u_norm = pred_norm(s, i, j);
                            let diff = v_norm - u_norm;
                            logits[idx] += v_norm * u_norm * (diff * diff).cos();
                        }
                        RoutingAlgorithm::Baseline => {
                            let mut dot = 0.0;
                            for d in 0..dim {
                                dot += outputs[(s * n_upper + j) * dim + d] * pred(s, i, j, d);
                            }
                            logits[idx] += dot;
                        }
                    }
                }
            }
        }
    }
    OracleRouting { logits, couplings, outputs }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter, in check order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub step: f64,
    pub tolerance: f64,
    pub precision: &'static str,
    /// Coordinates excluded as non-differentiable (kinks), as
    /// `(parameter, flat index)`.
    pub skipped: Vec<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares reverse-mode gradients against central finite differences
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate, at 64-bit precision.
///
/// `loss` must rebuild its graph from the current parameter values on every
/// call. Coordinates where the one-sided differences disagree strongly
/// (a kink under the probe step, e.g. a point sitting exactly on a clip
/// boundary) are excluded from the pass/fail decision and reported in
/// `skipped`. Relative error uses `max(|ad|, |fd|, 1e-8)` as denominator.
pub fn finite_diff_check<F>(
    params: &[(&str, &Tensor<f64>)],
    mut loss: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor<f64>>,
{
    let out = loss()?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, p)| {
            p.grad().ok_or_else(|| {
                Error::InvalidConfig(format!("parameter {name} received no gradient"))
            })
        })
        .collect::<Result<_>>()?;
    for (_, p) in params {
        p.zero_grad();
    }
    let f0 = out.item();
    if !f0.is_finite() {
        return Err(Error::NonFinite { context: "gradient check base point".to_string() });
    }

    let mut report = GradCheckReport {
        per_param: Vec::new(),
        max_rel_err: 0.0,
        step,
        tolerance,
        precision: "f64",
        skipped: Vec::new(),
        checked: 0,
    };
    for ((name, p), grads) in params.iter().zip(&analytic) {
        let mut param_max = 0.0f64;
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.set_value(i, orig + step);
            let f_plus = loss()?.item();
            p.set_value(i, orig - step);
            let f_minus = loss()?.item();
            p.set_value(i, orig);
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient check of {name}[{i}]"),
                });
            }
            let central = (f_plus - f_minus) / (2.0 * step);
            // One-sided slopes bracket the central estimate; a large gap
            // means the function has a kink inside the probe interval.
            let forward = (f_plus - f0) / step;
            let backward = (f0 - f_minus) / step;
            let gap = (forward - backward).abs();
            if gap > 1e-2 * forward.abs().max(backward.abs()).max(1.0) {
                report.skipped.push((name.to_string(), i));
                continue;
            }
            let ad = grads[i];
            let rel = (ad - central).abs() / ad.abs().max(central.abs()).max(1e-8);
            param_max = param_max.max(rel);
            report.checked += 1;
        }
        report.max_rel_err = report.max_rel_err.max(param_max);
        report.per_param.push((name.to_string(), param_max));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().trainable();
        let report = finite_diff_check(
            &[("x", &x)],
            || Ok(x.square().sum_all()),
            1e-5,
            1e-8,
        )
        .unwrap();
        // central differences are exact for quadratics up to rounding
        assert!(report.pass(), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn coordinate_on_clip_boundary_is_flagged() {
        // x[1] sits exactly on the upper clip boundary: one-sided slopes 1
        // and 0 disagree, so the checker must exclude that coordinate.
        let x = Tensor::<f64>::from_vec(&[2], vec![0.4, 1.0]).unwrap().trainable();
        let report = finite_diff_check(
            &[("x", &x)],
            || Ok(x.clip(0.0, 1.0).sum_all()),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.skipped, vec![("x".to_string(), 1)]);
        assert_eq!(report.checked, 1);
        assert!(report.pass());
    }

    #[test]
    fn detects_wrong_gradient() {
        // exp has gradient exp(x); pretend tolerance is tighter than the
        // deliberately broken comparison we construct via a huge step.
        let x = Tensor::<f64>::from_vec(&[2], vec![0.1, -0.2]).unwrap().trainable();
        let report = finite_diff_check(
            &[("x", &x)],
            || Ok(x.exp().sum_all()),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass());
        // a coarse step degrades the estimate enough to fail a 1e-12 gate
        let coarse = finite_diff_check(&[("x", &x)], || Ok(x.exp().sum_all()), 1e-2, 1e-12)
            .unwrap();
        assert!(!coarse.pass());
    }
}
