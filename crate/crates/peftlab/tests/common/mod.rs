//! Shared helpers for the integration test suites.
//!
//! The centerpiece is the finite-difference gradient oracle: an
//! implementation-independent check that perturbs each input element of an
//! op by ±h and compares the numeric slope against what the backward pass
//! reports. The oracle never consults the autodiff code for derivatives —
//! only for forward values — so agreement is evidence, not circularity.

#![allow(dead_code)] // each test binary uses its own subset of these helpers

use peftlab::rng::SeedRng;
use peftlab::tensor::ops;
use peftlab::Tensor;

/// Central-difference step. Small enough that truncation error (O(h²)) is
/// far below the tolerance, large enough that f64 rounding in the loss does
/// not dominate the quotient.
pub const FD_STEP: f64 = 1e-5;

/// Per-element relative tolerance for gradient agreement.
pub const FD_REL_TOL: f64 = 1e-4;

/// Compare analytic and numeric gradients for one op instance.
///
/// `inputs` are the differentiable leaves (data + shape); `build` maps fresh
/// leaf tensors to a scalar loss and must be deterministic. The relative
/// error denominator is floored at 1e-3, which turns the comparison into an
/// absolute check (at 1e-7) for near-zero gradients — still several orders
/// above central-difference noise.
pub fn finite_diff_check(
    op: &str,
    inputs: &[(Vec<f64>, Vec<usize>)],
    build: &dyn Fn(&[Tensor]) -> Tensor,
) {
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|(data, shape)| Tensor::param(data.clone(), shape).unwrap())
        .collect();
    let loss = build(&params);
    assert_eq!(loss.numel(), 1, "{op}: gradcheck loss must be scalar");
    loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |datasets: &[Vec<f64>]| -> f64 {
        let leaves: Vec<Tensor> = datasets
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| Tensor::from_vec(data.clone(), shape).unwrap())
            .collect();
        build(&leaves).item()
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    for (pi, (data, _)) in inputs.iter().enumerate() {
        for e in 0..data.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[pi][e] += FD_STEP;
            minus[pi][e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[pi][e];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < FD_REL_TOL,
                "{op}: input {pi} element {e}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}

/// Random values in [-2, 2].
fn randv(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    rng.uniform_vec(n, -2.0, 2.0)
}

/// Random values in [-2, 2] excluding (-0.1, 0.1), for ops with a kink at
/// zero where a two-sided difference quotient would be meaningless.
fn randv_away_from_zero(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.uniform(0.1, 2.0);
            if rng.uniform(0.0, 1.0) < 0.5 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Fixed random projection so that a non-scalar op output becomes a scalar
/// loss exercising every output element.
fn project(out: &Tensor, w: &Tensor) -> Tensor {
    out.mul(w).unwrap().sum().unwrap()
}

/// Every differentiable op, by the name its `Op` record reports.
pub const ALL_DIFF_OPS: &[&str] = &[
    "add",
    "add_bias",
    "multiply",
    "scale",
    "matmul",
    "relu",
    "sum",
    "transpose",
    "slice_cols",
    "rowsum",
    "rowscale",
    "concat",
    "kron",
    "layer_norm",
    "softmax",
    "embedding_lookup",
    "cross_entropy",
];

/// Run `instances` finite-difference checks of the named op, each on fresh
/// random shapes/values drawn from a seeded stream.
pub fn gradcheck_op(op: &str, instances: usize) {
    let mut rng = SeedRng::derive(0x9d5c_0ffe, op);
    for _ in 0..instances {
        let m = 2 + rng.index(3);
        let n = 2 + rng.index(3);
        let k = 2 + rng.index(3);
        match op {
            "add" => {
                let shape = vec![m, n];
                let w = Tensor::from_vec(randv(&mut rng, m * n), &shape).unwrap();
                finite_diff_check(
                    op,
                    &[
                        (randv(&mut rng, m * n), shape.clone()),
                        (randv(&mut rng, m * n), shape.clone()),
                    ],
                    &|p| project(&p[0].add(&p[1]).unwrap(), &w),
                );
            }
            "add_bias" => {
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(
                    op,
                    &[(randv(&mut rng, m * n), vec![m, n]), (randv(&mut rng, n), vec![n])],
                    &|p| project(&p[0].add_bias(&p[1]).unwrap(), &w),
                );
            }
            "multiply" => {
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(
                    op,
                    &[
                        (randv(&mut rng, m * n), vec![m, n]),
                        (randv(&mut rng, m * n), vec![m, n]),
                    ],
                    &|p| project(&p[0].mul(&p[1]).unwrap(), &w),
                );
            }
            "scale" => {
                let c = rng.uniform(-3.0, 3.0);
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(op, &[(randv(&mut rng, m * n), vec![m, n])], &|p| {
                    project(&p[0].scale(c).unwrap(), &w)
                });
            }
            "matmul" => {
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(
                    op,
                    &[
                        (randv(&mut rng, m * k), vec![m, k]),
                        (randv(&mut rng, k * n), vec![k, n]),
                    ],
                    &|p| project(&p[0].matmul(&p[1]).unwrap(), &w),
                );
            }
            "relu" => {
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(
                    op,
                    &[(randv_away_from_zero(&mut rng, m * n), vec![m, n])],
                    &|p| project(&p[0].relu().unwrap(), &w),
                );
            }
            "sum" => {
                finite_diff_check(op, &[(randv(&mut rng, m * n), vec![m, n])], &|p| {
                    p[0].sum().unwrap()
                });
            }
            "transpose" => {
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[n, m]).unwrap();
                finite_diff_check(op, &[(randv(&mut rng, m * n), vec![m, n])], &|p| {
                    project(&p[0].transpose().unwrap(), &w)
                });
            }
            "slice_cols" => {
                let n = n.max(3);
                let start = rng.index(n - 1);
                let len = 1 + rng.index(n - start - 1);
                let w = Tensor::from_vec(randv(&mut rng, m * len), &[m, len]).unwrap();
                finite_diff_check(op, &[(randv(&mut rng, m * n), vec![m, n])], &|p| {
                    project(&p[0].slice_cols(start, len).unwrap(), &w)
                });
            }
            "rowsum" => {
                let w = Tensor::from_vec(randv(&mut rng, m), &[m, 1]).unwrap();
                finite_diff_check(op, &[(randv(&mut rng, m * n), vec![m, n])], &|p| {
                    project(&p[0].rowsum().unwrap(), &w)
                });
            }
            "rowscale" => {
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(
                    op,
                    &[
                        (randv(&mut rng, m * n), vec![m, n]),
                        (randv(&mut rng, m), vec![m, 1]),
                    ],
                    &|p| project(&p[0].rowscale(&p[1]).unwrap(), &w),
                );
            }
            "concat" => {
                let axis = rng.index(2);
                let w = if axis == 1 {
                    Tensor::from_vec(randv(&mut rng, m * (n + k)), &[m, n + k]).unwrap()
                } else {
                    Tensor::from_vec(randv(&mut rng, (m + k) * n), &[m + k, n]).unwrap()
                };
                let shapes = if axis == 1 {
                    [(m, n), (m, k)]
                } else {
                    [(m, n), (k, n)]
                };
                finite_diff_check(
                    op,
                    &[
                        (randv(&mut rng, shapes[0].0 * shapes[0].1), vec![shapes[0].0, shapes[0].1]),
                        (randv(&mut rng, shapes[1].0 * shapes[1].1), vec![shapes[1].0, shapes[1].1]),
                    ],
                    &|p| project(&ops::concat(&[p[0].clone(), p[1].clone()], axis).unwrap(), &w),
                );
            }
            "kron" => {
                let (p_, q_) = (2 + rng.index(2), 2 + rng.index(2));
                let w = Tensor::from_vec(randv(&mut rng, m * p_ * n * q_), &[m * p_, n * q_]).unwrap();
                finite_diff_check(
                    op,
                    &[
                        (randv(&mut rng, m * n), vec![m, n]),
                        (randv(&mut rng, p_ * q_), vec![p_, q_]),
                    ],
                    &|p| project(&p[0].kron(&p[1]).unwrap(), &w),
                );
            }
            "layer_norm" => {
                let n = n.max(3);
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(
                    op,
                    &[
                        (randv(&mut rng, m * n), vec![m, n]),
                        (randv(&mut rng, n), vec![n]),
                        (randv(&mut rng, n), vec![n]),
                    ],
                    &|p| project(&p[0].layer_norm(&p[1], &p[2], 1e-5).unwrap(), &w),
                );
            }
            "softmax" => {
                let axis = rng.index(2);
                let w = Tensor::from_vec(randv(&mut rng, m * n), &[m, n]).unwrap();
                finite_diff_check(op, &[(randv(&mut rng, m * n), vec![m, n])], &|p| {
                    project(&p[0].softmax(axis).unwrap(), &w)
                });
            }
            "embedding_lookup" => {
                let v = 3 + rng.index(3);
                let t = 3 + rng.index(3);
                // Deliberately allow repeated ids to exercise accumulation.
                let ids: Vec<usize> = (0..t).map(|_| rng.index(v)).collect();
                let w = Tensor::from_vec(randv(&mut rng, t * n), &[t, n]).unwrap();
                finite_diff_check(op, &[(randv(&mut rng, v * n), vec![v, n])], &|p| {
                    project(&ops::embedding_lookup(&p[0], &ids).unwrap(), &w)
                });
            }
            "cross_entropy" => {
                let t = 2 + rng.index(3);
                let v = 3 + rng.index(3);
                // One in three positions ignored, rest random classes.
                let targets: Vec<i64> = (0..t)
                    .map(|i| if i % 3 == 2 { -100 } else { rng.index(v) as i64 })
                    .collect();
                finite_diff_check(op, &[(randv(&mut rng, t * v), vec![t, v])], &|p| {
                    ops::cross_entropy(&p[0], &targets, -100).unwrap()
                });
            }
            other => panic!("no gradcheck builder for op `{other}`"),
        }
    }
}
