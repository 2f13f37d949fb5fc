//! Self-verification: finite-difference oracles, the gradient-check
//! catalog, and the identity suite behind the `verify` subcommand.

pub mod fd;
pub mod scaling;
mod suite;

pub use fd::{finite_difference, relative_deviation, run_grad_case, GradCase, FD_STEP};
pub use suite::{run_suite, CheckReport, VerifyOptions};

use crate::attention::{
    exact_attention, linear_attention, s2_position_attention_fast_tape, DENOM_EPS,
};
use crate::favor::{phi_features, FeatureMap};
use crate::positional::{build_neighbor_map, s1_axis_features_tape, PixelCoords};
use crate::rng::chacha;
use crate::tensor::{ReduceKind, Tape, Tensor, UnaryKind, Var};

/// Weighted sum of all elements against a fixed, non-uniform pattern.
/// More sensitive than a plain sum: transposition and indexing mistakes in
/// backward rules cannot cancel out.
fn spread_sum(tape: &mut Tape<f64>, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).cos() + 0.1).collect();
    let w = tape.constant(Tensor::new(shape, weights).unwrap());
    let prod = tape.mul(v, w).unwrap();
    tape.sum_all(prod).unwrap()
}

/// Every differentiable operation in the crate, as finite-difference
/// checkable cases. Inputs are sampled at magnitude <= 3 except where an
/// exponential would leave the well-conditioned range.
pub fn grad_cases() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = Vec::new();
    let mut push = |name: &'static str,
                    shapes: Vec<Vec<usize>>,
                    scale: f64,
                    build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>| {
        cases.push(GradCase {
            name,
            shapes,
            scale,
            build,
        });
    };

    push(
        "matmul",
        vec![vec![3, 4], vec![4, 2]],
        3.0,
        Box::new(|t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            spread_sum(t, c)
        }),
    );
    push(
        "matmul_batched",
        vec![vec![2, 3, 4], vec![2, 4, 2]],
        2.0,
        Box::new(|t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            spread_sum(t, c)
        }),
    );
    push(
        "matmul_shared_rhs",
        vec![vec![2, 3, 4], vec![4, 2]],
        2.0,
        Box::new(|t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            spread_sum(t, c)
        }),
    );
    push(
        "matmul_shared_lhs",
        vec![vec![3, 4], vec![2, 4, 2]],
        2.0,
        Box::new(|t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            spread_sum(t, c)
        }),
    );
    for (name, kind) in [
        ("sin", UnaryKind::Sin),
        ("cos", UnaryKind::Cos),
        ("neg", UnaryKind::Neg),
        ("relu", UnaryKind::Relu),
    ] {
        push(
            name,
            vec![vec![3, 4]],
            3.0,
            Box::new(move |t, v| {
                let y = t.unary(kind, v[0]).unwrap();
                spread_sum(t, y)
            }),
        );
    }
    push(
        "exp",
        vec![vec![3, 4]],
        1.5,
        Box::new(|t, v| {
            let y = t.exp(v[0]).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "sincos_concat",
        vec![vec![3, 4]],
        3.0,
        Box::new(|t, v| {
            let y = t.sincos_concat(v[0]).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "matmul_tn",
        vec![vec![4, 3], vec![4, 2]],
        2.0,
        Box::new(|t, v| {
            let c = t.matmul_tn(v[0], v[1]).unwrap();
            spread_sum(t, c)
        }),
    );
    push(
        "matmul_tn_batched",
        vec![vec![2, 4, 3], vec![2, 4, 2]],
        2.0,
        Box::new(|t, v| {
            let c = t.matmul_tn(v[0], v[1]).unwrap();
            spread_sum(t, c)
        }),
    );
    push(
        "softmax_rows",
        vec![vec![2, 5]],
        3.0,
        Box::new(|t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "reduce_sum_all",
        vec![vec![2, 6]],
        3.0,
        Box::new(|t, v| t.sum_all(v[0]).unwrap()),
    );
    push(
        "reduce_mean_axis",
        vec![vec![2, 3, 4]],
        3.0,
        Box::new(|t, v| {
            let y = t.reduce(ReduceKind::Mean, v[0], Some(1)).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "reduce_sum_axis0",
        vec![vec![3, 4]],
        3.0,
        Box::new(|t, v| {
            let y = t.reduce(ReduceKind::Sum, v[0], Some(0)).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "concat",
        vec![vec![2, 3], vec![2, 2], vec![2, 4]],
        3.0,
        Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1], v[2]], 1).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "add_sub_mul",
        vec![vec![2, 3], vec![2, 3], vec![2, 3]],
        3.0,
        Box::new(|t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[2]).unwrap();
            let m = t.mul(d, v[0]).unwrap();
            spread_sum(t, m)
        }),
    );
    push(
        "scale",
        vec![vec![2, 3]],
        3.0,
        Box::new(|t, v| {
            let y = t.scale(v[0], -1.7).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "add_row_mul_row",
        vec![vec![3, 4], vec![4], vec![4]],
        3.0,
        Box::new(|t, v| {
            let a = t.add_row(v[0], v[1]).unwrap();
            let m = t.mul_row(a, v[2]).unwrap();
            spread_sum(t, m)
        }),
    );
    push(
        "scale_rows",
        vec![vec![2, 3, 4], vec![2, 3, 1]],
        2.0,
        Box::new(|t, v| {
            let y = t.scale_rows(v[0], v[1]).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "div_rows_clamped",
        vec![vec![2, 3, 4], vec![2, 3, 1]],
        2.0,
        Box::new(|t, v| {
            // shift denominators to [1, 5]: away from the clamp and from
            // zero so central differences stay well conditioned
            let shift = t.constant(Tensor::full(vec![2, 3, 1], 3.0));
            let den = t.add(v[1], shift).unwrap();
            let y = t.div_rows_clamped(v[0], den, DENOM_EPS).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "transpose_last",
        vec![vec![2, 3, 4]],
        3.0,
        Box::new(|t, v| {
            let y = t.transpose_last(v[0]).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "reshape_narrow",
        vec![vec![2, 6]],
        3.0,
        Box::new(|t, v| {
            let r = t.reshape(v[0], vec![3, 4]).unwrap();
            let n = t.narrow(r, 1, 1, 2).unwrap();
            spread_sum(t, n)
        }),
    );
    push(
        "gather_rows",
        vec![vec![5, 3]],
        3.0,
        Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[0, 2, 2, 4]).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "repeat_batch",
        vec![vec![3, 4]],
        3.0,
        Box::new(|t, v| {
            let y = t.repeat_batch(v[0], 3).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "layer_norm",
        vec![vec![3, 5], vec![5], vec![5]],
        2.0,
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "cross_entropy",
        vec![vec![3, 4]],
        3.0,
        Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 3]).unwrap()),
    );
    push(
        "dropout_fixed_mask",
        vec![vec![3, 4]],
        3.0,
        Box::new(|t, v| {
            // the mask must be identical across oracle re-evaluations
            let mut rng = chacha(42);
            let y = t.dropout(v[0], 0.3, &mut rng).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "s2_neighborhood",
        vec![vec![9, 3], vec![9, 2]],
        2.0,
        Box::new(|t, v| {
            let coords = PixelCoords::new(3, 3);
            let map = build_neighbor_map(&coords, 2);
            let y = t.s2_neighborhood(v[0], v[1], &map).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "phi_features",
        vec![vec![3, 2]],
        1.0,
        Box::new(|t, v| {
            let fm = FeatureMap::draw(5, 0, 6, 2).unwrap();
            let y = phi_features(t, v[0], &fm).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "s1_axis_features",
        vec![vec![4], vec![2], vec![2], vec![2]],
        2.0,
        Box::new(|t, v| {
            let (qp, kp) = s1_axis_features_tape(t, v[0], v[1], v[2], v[3]).unwrap();
            let both = t.concat(&[qp, kp], 1).unwrap();
            spread_sum(t, both)
        }),
    );
    push(
        "exact_attention",
        vec![vec![4, 3], vec![4, 3], vec![4, 3]],
        1.5,
        Box::new(|t, v| {
            let y = exact_attention(t, v[0], v[1], v[2]).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "linear_attention",
        vec![vec![3, 2], vec![3, 2], vec![3, 2]],
        1.0,
        Box::new(|t, v| {
            let fm = FeatureMap::draw(8, 0, 8, 2).unwrap();
            let qf = phi_features(t, v[0], &fm).unwrap();
            let kf = phi_features(t, v[1], &fm).unwrap();
            let y = linear_attention(t, qf, kf, v[2], DENOM_EPS).unwrap();
            spread_sum(t, y)
        }),
    );
    push(
        "s2_fast_attention",
        vec![vec![9, 2], vec![3, 2], vec![9, 2]],
        1.0,
        Box::new(|t, v| {
            let coords = PixelCoords::new(3, 3);
            let map = build_neighbor_map(&coords, 2);
            let fm = FeatureMap::draw(13, 0, 6, 2).unwrap();
            let qf = phi_features(t, v[0], &fm).unwrap();
            let wf = phi_features(t, v[1], &fm).unwrap();
            let y = s2_position_attention_fast_tape(t, qf, wf, &map, v[2], DENOM_EPS).unwrap();
            spread_sum(t, y)
        }),
    );
    cases
}

/// Runs the whole catalog `trials` times each; returns (name, worst
/// relative deviation) per case.
pub fn run_all_grad_checks(trials: usize, seed: u64) -> Vec<(String, f64)> {
    grad_cases()
        .iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let mut rng = chacha(crate::rng::split_indexed(seed, case.name, trial as u64));
                worst = worst.max(run_grad_case(case, &mut rng));
            }
            (case.name.to_string(), worst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes_finite_difference_check() {
        let results = run_all_grad_checks(4, 99);
        assert!(results.len() >= 25, "catalog shrank: {}", results.len());
        for (name, worst) in &results {
            assert!(worst < &1e-4, "{name}: worst relative deviation {worst}");
        }
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_difference(&mut f, &[1.0, -2.0, 0.5], FD_STEP);
        assert!((g[0] - 2.0).abs() < 1e-9);
        assert!((g[1] + 4.0).abs() < 1e-9);
        assert!((g[2] - 1.0).abs() < 1e-9);
    }
}
