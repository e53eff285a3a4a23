//! Per-operation gradient checks against central finite differences, plus
//! forward-path properties (softmax normalization, conv against its
//! nested-loop oracle). Every differentiable op is probed over >= 20 seeds
//! at 64-bit precision with a 1e-4 relative-error gate.

use capsnet_core::tensor::Tensor;
use capsnet_core::verify::finite_diff_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor with every element kept at least `margin` away from the
/// values in `avoid` (for ops with kinks).
fn randn_avoiding(
    shape: &[usize],
    std: f64,
    avoid: &[f64],
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * std;
            if avoid.iter().all(|&a| (v - a).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Fixed random weights so the scalar loss has non-uniform sensitivity.
fn weighted_sum(x: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed ^ 0x5eed);
    let w = Tensor::<f64>::randn(x.shape(), 1.0, &mut r);
    x.mul(&w).unwrap().sum_all()
}

fn check_unary(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Tensor<f64>, op: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = make(&mut r).trainable();
        let report =
            finite_diff_check(&[("x", &x)], || Ok(weighted_sum(&op(&x), seed)), STEP, TOL)
                .unwrap();
        assert!(report.pass(), "{name} seed {seed}: {report:?}");
        assert!(report.checked > 0, "{name} seed {seed}: nothing checked");
    }
}

#[test]
fn grad_add_sub_mul_div() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r).trainable();
        let b = randn_avoiding(&[3], 1.0, &[0.0], 0.4, &mut r).trainable();
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("div", 3),
        ] {
            let (a, b) = (a.clone(), b.clone());
            let report = finite_diff_check(
                &[("a", &a), ("b", &b)],
                || {
                    let y = match f {
                        0 => a.add(&b),
                        1 => a.sub(&b),
                        2 => a.mul(&b),
                        _ => a.div(&b),
                    }?;
                    Ok(weighted_sum(&y, seed))
                },
                STEP,
                TOL,
            )
            .unwrap();
            assert!(report.pass(), "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn grad_neg_cos_square_exp() {
    check_unary("neg", |r| Tensor::randn(&[2, 4], 1.0, r), |x| x.neg());
    check_unary("cos", |r| Tensor::randn(&[2, 4], 1.0, r), |x| x.cos());
    check_unary("square", |r| Tensor::randn(&[2, 4], 1.0, r), |x| x.square());
    check_unary("exp", |r| Tensor::randn(&[2, 4], 0.5, r), |x| x.exp());
}

#[test]
fn grad_sqrt_positive_domain() {
    check_unary(
        "sqrt",
        |r| {
            let n: Vec<f64> = (0..8).map(|_| 0.2 + r.gen::<f64>() * 2.0).collect();
            Tensor::from_vec(&[2, 4], n).unwrap()
        },
        |x| x.sqrt(),
    );
}

#[test]
fn grad_scalar_ops() {
    check_unary("add_scalar", |r| Tensor::randn(&[5], 1.0, r), |x| x.add_scalar(0.7));
    check_unary("mul_scalar", |r| Tensor::randn(&[5], 1.0, r), |x| x.mul_scalar(-1.3));
}

#[test]
fn grad_kinked_ops_away_from_boundaries() {
    // sample at least 1e-3 away from each kink, per the probe-step rule
    check_unary(
        "relu",
        |r| randn_avoiding(&[3, 3], 1.0, &[0.0], 1e-2, r),
        |x| x.relu(),
    );
    check_unary(
        "max_scalar",
        |r| randn_avoiding(&[3, 3], 1.0, &[0.25], 1e-2, r),
        |x| x.max_scalar(0.25),
    );
    check_unary(
        "clip",
        |r| randn_avoiding(&[3, 3], 1.0, &[-0.5, 0.5], 1e-2, r),
        |x| x.clip(-0.5, 0.5),
    );
}

#[test]
fn grad_softmax() {
    for axis in 0..2 {
        check_unary("softmax", |r| Tensor::randn(&[3, 4], 1.5, r), |x| {
            x.softmax(axis).unwrap()
        });
    }
}

#[test]
fn grad_reductions_and_shapes() {
    check_unary("reduce_sum", |r| Tensor::randn(&[2, 3, 2], 1.0, r), |x| {
        x.reduce_sum(1, false).unwrap()
    });
    check_unary("reduce_mean", |r| Tensor::randn(&[2, 3, 2], 1.0, r), |x| {
        x.reduce_mean(2, true).unwrap()
    });
    check_unary("mean_all", |r| Tensor::randn(&[7], 1.0, r), |x| {
        x.mean_all().reshape(&[1]).unwrap()
    });
    check_unary("reshape", |r| Tensor::randn(&[2, 6], 1.0, r), |x| {
        x.reshape(&[3, 4]).unwrap()
    });
    check_unary("permute", |r| Tensor::randn(&[2, 3, 4], 1.0, r), |x| {
        x.permute(&[2, 0, 1]).unwrap()
    });
    check_unary("slice", |r| Tensor::randn(&[3, 5], 1.0, r), |x| {
        x.slice_axis(1, 1, 3).unwrap()
    });
}

#[test]
fn grad_l2_norm_away_from_zero() {
    check_unary(
        "l2_norm",
        |r| {
            // keep every lane norm comfortably away from the zero kink
            loop {
                let x = Tensor::<f64>::randn(&[3, 4], 1.0, r);
                let norms = x.l2_norm(1).unwrap();
                if norms.to_vec().iter().all(|&n| n > 0.3) {
                    break x;
                }
            }
        },
        |x| x.l2_norm(1).unwrap(),
    );
}

#[test]
fn grad_concat() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[2, 2], 1.0, &mut r).trainable();
        let b = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r).trainable();
        let report = finite_diff_check(
            &[("a", &a), ("b", &b)],
            || Ok(weighted_sum(&Tensor::concat(&[&a, &b], 1)?, seed)),
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.pass(), "concat seed {seed}: {report:?}");
    }
}

#[test]
fn grad_matmul_plain_and_batched() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r).trainable();
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r).trainable();
        let report = finite_diff_check(
            &[("a", &a), ("b", &b)],
            || Ok(weighted_sum(&a.matmul(&b)?, seed)),
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.pass(), "matmul seed {seed}: {report:?}");

        // broadcast batch dims: [2,1,2,3] x [3,3,2] -> [2,3,2,2]
        let a = Tensor::<f64>::randn(&[2, 1, 2, 3], 1.0, &mut r).trainable();
        let b = Tensor::<f64>::randn(&[3, 3, 2], 1.0, &mut r).trainable();
        let report = finite_diff_check(
            &[("a", &a), ("b", &b)],
            || Ok(weighted_sum(&a.matmul(&b)?, seed)),
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.pass(), "batched matmul seed {seed}: {report:?}");
    }
}

#[test]
fn grad_conv2d() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        for stride in [1, 2] {
            let x = Tensor::<f64>::randn(&[2, 2, 5, 5], 1.0, &mut r).trainable();
            let k = Tensor::<f64>::randn(&[3, 2, 2, 2], 1.0, &mut r).trainable();
            let report = finite_diff_check(
                &[("input", &x), ("kernel", &k)],
                || Ok(weighted_sum(&x.conv2d(&k, stride)?, seed)),
                STEP,
                TOL,
            )
            .unwrap();
            assert!(report.pass(), "conv2d stride {stride} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn grad_batch_norm_train_and_eval() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[4, 3, 2, 2], 1.0, &mut r).trainable();
        let gamma = Tensor::<f64>::randn(&[3], 0.3, &mut r).add_scalar(1.0);
        let gamma = Tensor::from_vec(&[3], gamma.to_vec()).unwrap().trainable();
        let beta = Tensor::<f64>::randn(&[3], 0.3, &mut r).trainable();
        for train in [true, false] {
            let rm = Tensor::<f64>::randn(&[3], 0.2, &mut r);
            let rv = Tensor::<f64>::from_vec(
                &[3],
                (0..3).map(|_| 0.5 + r.gen::<f64>()).collect(),
            )
            .unwrap();
            let report = finite_diff_check(
                &[("x", &x), ("gamma", &gamma), ("beta", &beta)],
                || {
                    let y = x.batch_norm(&gamma, &beta, &rm, &rv, train, 1e-5, 0.9)?;
                    Ok(weighted_sum(&y, seed))
                },
                STEP,
                TOL,
            )
            .unwrap();
            assert!(report.pass(), "batch_norm train={train} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn softmax_positive_and_normalized() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[3, 5, 2], 4.0, &mut r);
        for axis in 0..3 {
            let y = x.softmax(axis).unwrap();
            assert!(y.to_vec().iter().all(|&v| v > 0.0));
            let sums = y.reduce_sum(axis, false).unwrap();
            for s in sums.to_vec() {
                assert!((s - 1.0).abs() < 1e-9, "axis {axis} seed {seed}: sum {s}");
            }
        }
    }
}

#[test]
fn conv2d_matches_nested_loop_oracle_on_random_inputs() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut r);
        for stride in [1, 2, 3] {
            let y = x.conv2d(&k, stride).unwrap();
            let oh = (7 - 3) / stride + 1;
            let ow = (6 - 3) / stride + 1;
            let (xd, kd, yd) = (x.to_vec(), k.to_vec(), y.to_vec());
            for s in 0..2 {
                for o in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut want = 0.0;
                            for c in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        want += xd[((s * 3 + c) * 7 + oy * stride + ky) * 6
                                            + ox * stride
                                            + kx]
                                            * kd[((o * 3 + c) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                            let got = yd[((s * 4 + o) * oh + oy) * ow + ox];
                            assert!((got - want).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
