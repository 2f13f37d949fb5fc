//! The identity suite behind `verify`: every invariant the library
//! promises, exercised as a named pass/fail check with measured values.
//! Needs no dataset files; format checks run on synthetic fixtures.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    clamp_denominator, exact_attention, linear_attention, multi_head_attention,
    s2_position_attention_fast, s2_position_attention_naive, AttentionImpl, AttnContext,
    AttnParams, HeadLayout, DENOM_EPS,
};
use crate::data::{
    is_shiftable, load_cifar10, load_idx, resize_bilinear, select_shiftable, shift_x,
    write_idx_fixture, DataError, Dataset, LabeledImage,
};
use crate::experiment::Adam;
use crate::favor::{phi_features, FeatureMap};
use crate::model::{
    draw_feature_maps, forward_with_offset, load_checkpoint, save_checkpoint, LeafSet,
    ModelConfig, ParamStore,
};
use crate::positional::{
    build_neighbor_map, s1_axis_features, s1_axis_features_generic, s1_features_2d,
    s2_clip_index, EncodingMode, PixelCoords, S1AxisParams,
};
use crate::rng::{chacha, split};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Feature count for the unbiasedness check.
    pub unbiased_m: usize,
    /// Independent redraws for the unbiasedness check; the acceptance
    /// band scales with `1/sqrt(redraws)` through the sample error.
    pub redraws: usize,
    pub grad_trials: usize,
    /// Replace the rotation-scaling constraint with generic blocks; the
    /// invariance checks must then fail, demonstrating sensitivity.
    pub break_lemma: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 7,
            unbiased_m: 2048,
            redraws: 200,
            grad_trials: 4,
            break_lemma: false,
        }
    }
}

fn check(
    reports: &mut Vec<CheckReport>,
    name: &str,
    f: impl FnOnce() -> (bool, String),
) {
    let t0 = Instant::now();
    let (passed, detail) = f();
    reports.push(CheckReport {
        name: name.to_string(),
        passed,
        detail,
        secs: t0.elapsed().as_secs_f64(),
    });
}

/// Run the whole suite. All checks pass on a correct build with default
/// options; `--break-lemma` must flip the invariance checks to failures.
pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let r = &mut reports;

    lemma_checks(r, opts);
    s2_lookup_checks(r);
    favor_checks(r, opts);
    gradient_checks(r, opts);
    tensor_checks(r, opts);
    attention_checks(r, opts);
    model_checks(r, opts);
    optimizer_and_format_checks(r, opts);
    reports
}

// ── Lemma / strategy-1 invariances ──────────────────────────────────

fn lemma_sample(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64, f64, f64) {
    let z = rng.gen_range(-10.0..10.0);
    let zp = rng.gen_range(-10.0..10.0);
    let tau = rng.gen_range(-10.0..10.0);
    let omega = rng.gen_range(1e-6..4.0);
    let alpha = rng.gen_range(-2.0..2.0);
    let beta = rng.gen_range(-2.0..2.0);
    (z, zp, tau, omega, alpha, beta)
}

fn pair_dot(q: &[f64], k: &[f64]) -> f64 {
    q.iter().zip(k).map(|(a, b)| a * b).sum()
}

fn lemma_checks(r: &mut Vec<CheckReport>, opts: &VerifyOptions) {
    let trials = 1000;
    let break_lemma = opts.break_lemma;
    check(r, "lemma_invariance_single_lengthscale", || {
        let mut rng = chacha(split(opts.seed, "lemma"));
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (z, zp, tau, omega, alpha, beta) = lemma_sample(&mut rng);
            let dev = if break_lemma {
                let g = [alpha, beta, rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let (q0, _) = s1_axis_features_generic(&[z], &[omega], &[g]);
                let (_, k0) = s1_axis_features_generic(&[zp], &[omega], &[g]);
                let (q1, _) = s1_axis_features_generic(&[z - tau], &[omega], &[g]);
                let (_, k1) = s1_axis_features_generic(&[zp - tau], &[omega], &[g]);
                (pair_dot(&q0, &k0) - pair_dot(&q1, &k1)).abs()
            } else {
                let p = S1AxisParams {
                    omegas: vec![omega],
                    alphas: vec![alpha],
                    betas: vec![beta],
                };
                let (q0, _) = s1_axis_features(&[z], &p);
                let (_, k0) = s1_axis_features(&[zp], &p);
                let (q1, _) = s1_axis_features(&[z - tau], &p);
                let (_, k1) = s1_axis_features(&[zp - tau], &p);
                (pair_dot(&q0, &k0) - pair_dot(&q1, &k1)).abs()
            };
            worst = worst.max(dev);
        }
        (
            worst <= 1e-12,
            format!("worst |shifted - unshifted| = {worst:.3e} over {trials} trials (tolerance 1e-12)"),
        )
    });

    check(r, "lemma_invariance_concatenated_lengthscales", || {
        let mut rng = chacha(split(opts.seed, "lemma-concat"));
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let ml = 4;
            let params = S1AxisParams {
                omegas: (0..ml).map(|_| rng.gen_range(1e-6..4.0)).collect(),
                alphas: (0..ml).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                betas: (0..ml).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let z = rng.gen_range(-10.0..10.0);
            let zp = rng.gen_range(-10.0..10.0);
            let tau = rng.gen_range(-10.0..10.0);
            let (q0, _) = s1_axis_features(&[z], &params);
            let (_, k0) = s1_axis_features(&[zp], &params);
            let (q1, _) = s1_axis_features(&[z - tau], &params);
            let (_, k1) = s1_axis_features(&[zp - tau], &params);
            worst = worst.max((pair_dot(&q0, &k0) - pair_dot(&q1, &k1)).abs());
        }
        (
            worst <= 1e-12,
            format!("worst deviation {worst:.3e} over 200 trials, 4 lengthscales (tolerance 1e-12)"),
        )
    });

    check(r, "lemma_negative_control_generic_block", || {
        let mut rng = chacha(split(opts.seed, "lemma-neg"));
        let mut broken = 0usize;
        for _ in 0..trials {
            let (z, zp, tau, omega, _, _) = lemma_sample(&mut rng);
            let g = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let (q0, _) = s1_axis_features_generic(&[z], &[omega], &[g]);
            let (_, k0) = s1_axis_features_generic(&[zp], &[omega], &[g]);
            let (q1, _) = s1_axis_features_generic(&[z - tau], &[omega], &[g]);
            let (_, k1) = s1_axis_features_generic(&[zp - tau], &[omega], &[g]);
            if (pair_dot(&q0, &k0) - pair_dot(&q1, &k1)).abs() > 1e-3 {
                broken += 1;
            }
        }
        let frac = broken as f64 / trials as f64;
        (
            frac >= 0.99,
            format!("unconstrained blocks broke invariance in {broken}/{trials} trials (need >= 99%)"),
        )
    });

    check(r, "s1_2d_integer_shift_invariance", || {
        let mut rng = chacha(split(opts.seed, "s1-2d"));
        let coords = PixelCoords::new(5, 5);
        let mk = |rng: &mut ChaCha8Rng| S1AxisParams {
            omegas: (0..3).map(|_| rng.gen_range(1e-6..4.0)).collect(),
            alphas: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            betas: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let row = mk(&mut rng);
            let col = mk(&mut rng);
            let (q0, k0) = s1_features_2d(&coords, &row, &col, (0.0, 0.0));
            let dr = rng.gen_range(-20i64..=20) as f64;
            let dc = rng.gen_range(-20i64..=20) as f64;
            let (q1, k1) = s1_features_2d(&coords, &row, &col, (dr, dc));
            let l = coords.len();
            let width = q0.len() / l;
            for i in 0..l {
                for j in 0..l {
                    let d0 = pair_dot(&q0[i * width..(i + 1) * width], &k0[j * width..(j + 1) * width]);
                    let d1 = pair_dot(&q1[i * width..(i + 1) * width], &k1[j * width..(j + 1) * width]);
                    worst = worst.max((d0 - d1).abs());
                }
            }
        }
        (
            worst <= 1e-12,
            format!("worst pre-attention deviation under integer grid shifts: {worst:.3e}"),
        )
    });
}

fn s2_lookup_checks(r: &mut Vec<CheckReport>) {
    check(r, "s2_clip_lookup", || {
        let coords = PixelCoords::new(8, 8);
        let mut ok = true;
        let mut detail = String::new();
        // |1-4| + |2-0| = 5
        let i = 8 + 2;
        let j = 4 * 8;
        if s2_clip_index(&coords, i, j, 6) != 5 {
            ok = false;
            detail = "distance-5 lookup failed".into();
        }
        // distance 7 clipped to 6
        if s2_clip_index(&coords, 0, 3 * 8 + 4, 6) != 6 {
            ok = false;
            detail = "clip at 6 failed".into();
        }
        if s2_clip_index(&coords, 9, 9, 6) != 0 {
            ok = false;
            detail = "self distance not 0".into();
        }
        for a in 0..coords.len() {
            for b in 0..coords.len() {
                if s2_clip_index(&coords, a, b, 4) != s2_clip_index(&coords, b, a, 4) {
                    ok = false;
                    detail = format!("asymmetric lookup at ({a}, {b})");
                }
            }
        }
        if ok {
            detail = "clip values and symmetry over an 8x8 grid".into();
        }
        (ok, detail)
    });
}

// ── Feature-map checks ──────────────────────────────────────────────

fn favor_checks(r: &mut Vec<CheckReport>, opts: &VerifyOptions) {
    check(r, "favor_determinism_bitwise", || {
        let a = FeatureMap::draw(opts.seed, 3, 16, 4).unwrap();
        let b = FeatureMap::draw(opts.seed, 3, 16, 4).unwrap();
        let c = FeatureMap::draw(opts.seed, 4, 16, 4).unwrap();
        let x = [0.3, -0.2, 0.7, 0.1];
        let same = a.omega() == b.omega() && a.phi_vec(&x).unwrap() == b.phi_vec(&x).unwrap();
        let differs = a.omega() != c.omega();
        (
            same && differs,
            format!("identical (seed, epoch) reproduce phi bitwise: {same}; epochs differ: {differs}"),
        )
    });

    check(r, "favor_gaussian_moments", || {
        let fm = FeatureMap::draw(split(opts.seed, "moments"), 0, 1000, 100).unwrap();
        let n = fm.omega().len() as f64;
        let mean: f64 = fm.omega().iter().sum::<f64>() / n;
        let var: f64 = fm.omega().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let ok = mean.abs() < 3.0 / n.sqrt() && (var - 1.0).abs() < 3.0 * (2.0 / n).sqrt();
        (
            ok,
            format!("1e5 draws: mean {mean:.4e} (|.| < {:.1e}), var {var:.5} (within 3 SE of 1)", 3.0 / n.sqrt()),
        )
    });

    check(r, "favor_kernel_zero_inputs_exact", || {
        let fm = FeatureMap::draw(split(opts.seed, "zero"), 0, 24, 5).unwrap();
        let z = vec![0.0; 5];
        let est = fm.kernel_estimate(&z, &z).unwrap();
        ((est - 1.0).abs() == 0.0, format!("<phi(0), phi(0)> = {est}"))
    });

    check(r, "favor_unbiasedness_monte_carlo", || {
        let m = opts.unbiased_m;
        let redraws = opts.redraws;
        let d = 4;
        let mut rng = chacha(split(opts.seed, "unbiased"));
        let mut worst_sigma = 0.0f64;
        let mut detail_pair = String::new();
        // feature maps are shared across the 20 pairs per redraw
        let maps: Vec<FeatureMap> = (0..redraws)
            .map(|e| FeatureMap::draw(split(opts.seed, "unbiased-maps"), e as u64, m, d).unwrap())
            .collect();
        for pair in 0..20 {
            let sample_unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let scale = rng.gen_range(0.1..1.0) / norm.max(1e-9);
                v.iter().map(|x| x * scale).collect()
            };
            let q = sample_unit(&mut rng);
            let k = sample_unit(&mut rng);
            let target = pair_dot(&q, &k).exp();
            let estimates: Vec<f64> = maps
                .iter()
                .map(|fm| fm.kernel_estimate(&q, &k).unwrap())
                .collect();
            let mean: f64 = estimates.iter().sum::<f64>() / redraws as f64;
            let var: f64 = estimates
                .iter()
                .map(|e| (e - mean) * (e - mean))
                .sum::<f64>()
                / (redraws as f64 - 1.0);
            let se = (var / redraws as f64).sqrt().max(1e-300);
            let sigmas = (mean - target).abs() / se;
            if sigmas > worst_sigma {
                worst_sigma = sigmas;
                detail_pair = format!(
                    "pair {pair}: mean {mean:.6} vs exp(q.k) {target:.6}, {sigmas:.2} sigma"
                );
            }
        }
        (
            worst_sigma <= 3.0,
            format!("worst pair at {worst_sigma:.2} Monte-Carlo sigma over 20 pairs, {redraws} redraws, m={m} ({detail_pair})"),
        )
    });

    check(r, "favor_variance_shrinks_with_m", || {
        let mut rng = chacha(split(opts.seed, "var-m"));
        let d = 4;
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var_at = |m: usize| -> f64 {
            let redraws = 120;
            let ests: Vec<f64> = (0..redraws)
                .map(|e| {
                    FeatureMap::draw(split(opts.seed, "var-m-draw"), (m * 1000 + e) as u64, m, d)
                        .unwrap()
                        .kernel_estimate(&q, &k)
                        .unwrap()
                })
                .collect();
            let mean: f64 = ests.iter().sum::<f64>() / ests.len() as f64;
            ests.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (ests.len() - 1) as f64
        };
        let vars: Vec<f64> = [64usize, 256, 1024, 4096].iter().map(|&m| var_at(m)).collect();
        let ok = vars.windows(2).all(|w| w[1] < w[0]);
        (
            ok,
            format!(
                "sample variance over m = 64/256/1024/4096: {:.2e} / {:.2e} / {:.2e} / {:.2e} (monotone decreasing)",
                vars[0], vars[1], vars[2], vars[3]
            ),
        )
    });
}

// ── Gradient and tensor checks ──────────────────────────────────────

fn gradient_checks(r: &mut Vec<CheckReport>, opts: &VerifyOptions) {
    check(r, "gradients_vs_finite_differences_all_ops", || {
        let results = super::run_all_grad_checks(opts.grad_trials, split(opts.seed, "grad"));
        let total_trials = results.len() * opts.grad_trials;
        let worst = results
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .cloned()
            .unwrap();
        let passed = results.iter().all(|(_, w)| *w < 1e-4);
        (
            passed && total_trials >= 100,
            format!(
                "{} operations x {} trials ({} total): worst relative deviation {:.3e} ({})",
                results.len(),
                opts.grad_trials,
                total_trials,
                worst.1,
                worst.0
            ),
        )
    });

    check(r, "model_loss_gradient_vs_finite_differences", || {
        // tiny f64 model, every parameter tensor probed at sampled coordinates
        let cfg = ModelConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            feature_count: 4,
            mode: EncodingMode::S1,
            clip: 2,
            dropout: 0.0,
            ffn_mult: 2,
            classes: 3,
            image_h: 2,
            image_w: 3,
            channels: 1,
            lengthscales: 2,
        };
        let store = ParamStore::<f64>::init(&cfg, opts.seed).unwrap();
        let fms = draw_feature_maps(&cfg, split(opts.seed, "mfd"), 0).unwrap();
        let mut rng = chacha(split(opts.seed, "mimg"));
        let img = Tensor::<f64>::new(
            vec![1, cfg.seq_len(), 1],
            (0..cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let targets = vec![1usize];

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let leaves = LeafSet::insert_all(&mut tape, store, false);
            let x = tape.constant(img.clone());
            let out = forward_with_offset(
                &mut tape,
                &leaves,
                &cfg,
                &fms,
                x,
                AttentionImpl::Favor,
                None,
                (0.0, 0.0),
            )
            .unwrap();
            let l = tape.cross_entropy(out, &targets).unwrap();
            tape.value(l).data()[0]
        };

        let mut tape: Tape<f64> = Tape::new();
        let leaves = LeafSet::insert_all(&mut tape, &store, true);
        let x = tape.constant(img.clone());
        let out = forward_with_offset(
            &mut tape,
            &leaves,
            &cfg,
            &fms,
            x,
            AttentionImpl::Favor,
            None,
            (0.0, 0.0),
        )
        .unwrap();
        let l = tape.cross_entropy(out, &targets).unwrap();
        tape.backward(l).unwrap();

        let mut worst = 0.0f64;
        let mut worst_name = String::new();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let mut probe = ParamStore::<f64>::init(&cfg, opts.seed).unwrap();
        for name in &names {
            let analytic = tape.grad(leaves.var(name)).unwrap().to_vec();
            let n = analytic.len();
            let idxs: Vec<usize> = if n <= 4 {
                (0..n).collect()
            } else {
                (0..4).map(|i| (i * 2654435761) % n).collect()
            };
            for &i in &idxs {
                let orig = probe.get(name).data()[i];
                let h = super::FD_STEP;
                probe.get_mut(name).data_mut()[i] = orig + h;
                let up = loss_of(&probe);
                probe.get_mut(name).data_mut()[i] = orig - h;
                let down = loss_of(&probe);
                probe.get_mut(name).data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let dev = super::relative_deviation(analytic[i], fd);
                if dev > worst {
                    worst = dev;
                    worst_name = format!("{name}[{i}]");
                }
            }
        }
        (
            worst < 1e-4,
            format!("worst relative deviation {worst:.3e} at {worst_name}"),
        )
    });
}

fn tensor_checks(r: &mut Vec<CheckReport>, opts: &VerifyOptions) {
    check(r, "softmax_rows_sum_to_one", || {
        let mut rng = chacha(split(opts.seed, "softmax"));
        let mut worst = 0.0f64;
        for trial in 0..200 {
            let q = 2 + (trial % 7);
            let scale = if trial % 3 == 0 { 1000.0 } else { 5.0 };
            let data: Vec<f64> = (0..3 * q).map(|_| rng.gen_range(-scale..scale)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, q], data).unwrap());
            let y = tape.softmax_rows(x).unwrap();
            for row in tape.value(y).data().chunks(q) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        (
            worst <= 1e-12,
            format!("worst |row sum - 1| = {worst:.3e} over 200 random matrices"),
        )
    });

    check(r, "operations_bitwise_deterministic", || {
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let mut rng = chacha(split(opts.seed, "det"));
            let a = tape.leaf(
                Tensor::new(vec![40, 30], (0..1200).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
                true,
            );
            let b = tape.constant(
                Tensor::new(vec![30, 20], (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            );
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            let e = tape.sum_all(s).unwrap();
            tape.backward(e).unwrap();
            (
                tape.value(s).data().to_vec(),
                tape.grad(a).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        (
            v1 == v2 && g1 == g2,
            "repeated forward+backward bitwise identical (values and gradients)".into(),
        )
    });

    check(r, "denominator_clamp_counted", || {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let d = tape.constant(Tensor::new(vec![2, 1], vec![2.0, 1e-9]).unwrap());
        let o = tape.div_rows_clamped(a, d, DENOM_EPS).unwrap();
        let events = tape.clamp_events();
        let v = tape.value(o).data()[2];
        let expect = 3.0 / DENOM_EPS;
        (
            events == 1 && (v - expect).abs() < 1e-3,
            format!("one clamped row counted ({events}); clamped output {v:.3e} matches sign-preserving eps division"),
        )
    });
}

// ── Attention checks ────────────────────────────────────────────────

fn frobenius_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

fn attention_checks(r: &mut Vec<CheckReport>, opts: &VerifyOptions) {
    check(r, "linear_attention_converges_to_exact", || {
        let (l, d) = (16usize, 8usize);
        let mut rng = chacha(split(opts.seed, "conv"));
        let q: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let k: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let v: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let temp = (d as f64).powf(-0.25);

        let exact = {
            let mut tape: Tape<f64> = Tape::new();
            let qv = tape.constant(Tensor::new(vec![l, d], q.clone()).unwrap());
            let kv = tape.constant(Tensor::new(vec![l, d], k.clone()).unwrap());
            let vv = tape.constant(Tensor::new(vec![l, d], v.clone()).unwrap());
            let o = exact_attention(&mut tape, qv, kv, vv).unwrap();
            tape.value(o).data().to_vec()
        };
        let medians: Vec<f64> = [256usize, 1024, 4096]
            .iter()
            .map(|&m| {
                let mut errs: Vec<f64> = (0..10)
                    .map(|redraw| {
                        let fm =
                            FeatureMap::draw(split(opts.seed, "conv-fm"), (m * 100 + redraw) as u64, m, d)
                                .unwrap();
                        let mut tape: Tape<f64> = Tape::new();
                        let qv = tape.constant(
                            Tensor::new(vec![l, d], q.iter().map(|x| x * temp).collect()).unwrap(),
                        );
                        let kv = tape.constant(
                            Tensor::new(vec![l, d], k.iter().map(|x| x * temp).collect()).unwrap(),
                        );
                        let vv = tape.constant(Tensor::new(vec![l, d], v.clone()).unwrap());
                        let qf = phi_features(&mut tape, qv, &fm).unwrap();
                        let kf = phi_features(&mut tape, kv, &fm).unwrap();
                        let o = linear_attention(&mut tape, qf, kf, vv, DENOM_EPS).unwrap();
                        frobenius_rel_err(tape.value(o).data(), &exact)
                    })
                    .collect();
                errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                errs[errs.len() / 2]
            })
            .collect();
        let ok = medians[2] < 0.05 && medians.windows(2).all(|w| w[1] <= w[0]);
        (
            ok,
            format!(
                "median relative Frobenius error at m = 256/1024/4096: {:.4} / {:.4} / {:.4} (< 5% at 4096, non-increasing)",
                medians[0], medians[1], medians[2]
            ),
        )
    });

    check(r, "s2_fast_equals_naive", || {
        let mut rng = chacha(split(opts.seed, "s2eq"));
        let mut worst = 0.0f64;
        let mut instances = 0;
        for (h, w) in [(4usize, 4usize), (8, 8), (16, 16)] {
            let coords = PixelCoords::new(h, w);
            let l = coords.len();
            for &clip in &[1usize, 2, 4, 6] {
                for &m in &[4usize, 16] {
                    let dh = 4;
                    let fm = FeatureMap::draw(
                        split(opts.seed, "s2eq-fm"),
                        (h * 100 + clip * 10 + m) as u64,
                        m,
                        dh,
                    )
                    .unwrap();
                    let q: Vec<f64> = (0..l * dh).map(|_| rng.gen_range(-0.6..0.6)).collect();
                    let wt: Vec<f64> =
                        (0..(clip + 1) * dh).map(|_| rng.gen_range(-0.6..0.6)).collect();
                    let v: Vec<f64> = (0..l * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let qf: Vec<f64> =
                        q.chunks(dh).flat_map(|row| fm.phi_vec(row).unwrap()).collect();
                    let wf: Vec<f64> =
                        wt.chunks(dh).flat_map(|row| fm.phi_vec(row).unwrap()).collect();
                    let map = build_neighbor_map(&coords, clip);
                    let (o1, d1) =
                        s2_position_attention_naive(&qf, &wf, &coords, clip, &v, DENOM_EPS);
                    let (o2, d2) = s2_position_attention_fast(&qf, &wf, &map, &v, DENOM_EPS);
                    for (a, b) in o1.iter().zip(&o2).chain(d1.iter().zip(&d2)) {
                        worst = worst.max((a - b).abs());
                    }
                    instances += 1;
                }
            }
        }
        (
            worst <= 1e-10,
            format!("max |naive - fast| = {worst:.3e} over {instances} instances (outputs and denominators)"),
        )
    });

    check(r, "multi_head_permutation_equivariance", || {
        let (l, dim, heads) = (12usize, 8usize, 2usize);
        let dh = dim / heads;
        let coords = PixelCoords::new(3, 4);
        let layout = HeadLayout::for_mode(EncodingMode::None, heads).unwrap();
        let fms: Vec<FeatureMap> = (0..heads)
            .map(|h| FeatureMap::draw(split(opts.seed, "perm"), h as u64, 8, dh).unwrap())
            .collect();
        let mut rng = chacha(split(opts.seed, "perm-x"));
        let x: Vec<f64> = (0..l * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..dim * dim).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .collect();
        let run = |data: &[f64]| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let xv = tape.constant(Tensor::new(vec![l, dim], data.to_vec()).unwrap());
            let mk = |t: &mut Tape<f64>, w: &Vec<f64>| {
                t.constant(Tensor::new(vec![dim, dim], w.clone()).unwrap())
            };
            let zero = tape.constant(Tensor::zeros(vec![dim]));
            let params = AttnParams {
                wq: mk(&mut tape, &weights[0]),
                bq: zero,
                wk: mk(&mut tape, &weights[1]),
                bk: zero,
                wv: mk(&mut tape, &weights[2]),
                bv: zero,
                wo: mk(&mut tape, &weights[3]),
                bo: zero,
                s1_row: None,
                s1_col: None,
                rel_w: vec![],
            };
            let ctx = AttnContext {
                mode: EncodingMode::None,
                layout: &layout,
                d_head: dh,
                coords: &coords,
                feature_maps: &fms,
                neighbor_map: None,
                implementation: AttentionImpl::Favor,
                eps: DENOM_EPS,
                s1_coord_offset: (0.0, 0.0),
            };
            let out = multi_head_attention(&mut tape, xv, &params, &ctx, None).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&x);
        let perm: Vec<usize> = (0..l).map(|i| (i * 5 + 3) % l).collect();
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| x[i * dim..(i + 1) * dim].to_vec())
            .collect();
        let out_p = run(&permuted);
        let mut worst = 0.0f64;
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..dim {
                worst = worst.max((out_p[new_row * dim + c] - base[old_row * dim + c]).abs());
            }
        }
        (
            worst <= 1e-12,
            format!("permuted input gives permuted output, worst deviation {worst:.3e} (shared feature maps)"),
        )
    });

    check(r, "linear_paths_allocate_no_square_buffer", || {
        let l = 64;
        let d = 4;
        let fm = FeatureMap::draw(split(opts.seed, "alloc"), 0, 8, d).unwrap();
        let mut rng = chacha(split(opts.seed, "alloc-x"));
        let data = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };
        let mut tape: Tape<f64> = Tape::new();
        let q = tape.constant(Tensor::new(vec![l, d], data(&mut rng, l * d)).unwrap());
        let k = tape.constant(Tensor::new(vec![l, d], data(&mut rng, l * d)).unwrap());
        let v = tape.constant(Tensor::new(vec![l, d], data(&mut rng, l * d)).unwrap());
        let qf = phi_features(&mut tape, q, &fm).unwrap();
        let kf = phi_features(&mut tape, k, &fm).unwrap();
        let _ = linear_attention(&mut tape, qf, kf, v, DENOM_EPS).unwrap();
        let linear_clean = !tape.has_square_node(l);
        let linear_peak = tape.peak_node_numel();

        // s2 fast path on an 8x8 grid
        let coords = PixelCoords::new(8, 8);
        let map = build_neighbor_map(&coords, 4);
        let mut tape2: Tape<f64> = Tape::new();
        let l2 = coords.len();
        let q2 = tape2.constant(Tensor::new(vec![l2, d], data(&mut rng, l2 * d)).unwrap());
        let w2 = tape2.constant(Tensor::new(vec![5, d], data(&mut rng, 5 * d)).unwrap());
        let v2 = tape2.constant(Tensor::new(vec![l2, d], data(&mut rng, l2 * d)).unwrap());
        let qf2 = phi_features(&mut tape2, q2, &fm).unwrap();
        let wf2 = phi_features(&mut tape2, w2, &fm).unwrap();
        let _ =
            crate::attention::s2_position_attention_fast_tape(&mut tape2, qf2, wf2, &map, v2, DENOM_EPS)
                .unwrap();
        let s2_clean = !tape2.has_square_node(l2);

        // sanity: the audit must detect the exact path's square buffer
        let mut tape3: Tape<f64> = Tape::new();
        let q3 = tape3.constant(Tensor::new(vec![l, d], data(&mut rng, l * d)).unwrap());
        let k3 = tape3.constant(Tensor::new(vec![l, d], data(&mut rng, l * d)).unwrap());
        let v3 = tape3.constant(Tensor::new(vec![l, d], data(&mut rng, l * d)).unwrap());
        let _ = exact_attention(&mut tape3, q3, k3, v3).unwrap();
        let exact_detected = tape3.has_square_node(l);

        (
            linear_clean && s2_clean && exact_detected,
            format!(
                "linear path peak buffer {linear_peak} elements, no [l, l] nodes; audit detects the exact path's square: {exact_detected}"
            ),
        )
    });

    check(r, "s2_head_split_separation", || {
        let (l_h, l_w, dim, heads) = (3usize, 3usize, 8usize, 2usize);
        let dh = dim / heads;
        let l = l_h * l_w;
        let coords = PixelCoords::new(l_h, l_w);
        let clip = 2;
        let map = build_neighbor_map(&coords, clip);
        let layout = HeadLayout::for_mode(EncodingMode::S2, heads).unwrap();
        let fms: Vec<FeatureMap> = (0..heads)
            .map(|h| FeatureMap::draw(split(opts.seed, "split"), h as u64, 8, dh).unwrap())
            .collect();
        let mut rng = chacha(split(opts.seed, "split-x"));
        let x: Vec<f64> = (0..l * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wq: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wv: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let run = |wk: &[f64], rel: &[f64]| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let xv = tape.constant(Tensor::new(vec![l, dim], x.clone()).unwrap());
            // identity output projection isolates per-head columns
            let mut eye = vec![0.0; dim * dim];
            for i in 0..dim {
                eye[i * dim + i] = 1.0;
            }
            let zero_dim = tape.constant(Tensor::zeros(vec![dim]));
            let zero_k = tape.constant(Tensor::zeros(vec![dh]));
            let params = AttnParams {
                wq: tape.constant(Tensor::new(vec![dim, dim], wq.clone()).unwrap()),
                bq: zero_dim,
                wk: tape.constant(Tensor::new(vec![dim, dh], wk.to_vec()).unwrap()),
                bk: zero_k,
                wv: tape.constant(Tensor::new(vec![dim, dim], wv.clone()).unwrap()),
                bv: zero_dim,
                wo: tape.constant(Tensor::new(vec![dim, dim], eye).unwrap()),
                bo: zero_dim,
                s1_row: None,
                s1_col: None,
                rel_w: vec![tape.constant(
                    Tensor::new(vec![clip + 1, dh], rel.to_vec()).unwrap(),
                )],
            };
            let ctx = AttnContext {
                mode: EncodingMode::S2,
                layout: &layout,
                d_head: dh,
                coords: &coords,
                feature_maps: &fms,
                neighbor_map: Some(&map),
                implementation: AttentionImpl::Favor,
                eps: DENOM_EPS,
                s1_coord_offset: (0.0, 0.0),
            };
            let out = multi_head_attention(&mut tape, xv, &params, &ctx, None).unwrap();
            tape.value(out).data().to_vec()
        };
        let wk_a: Vec<f64> = (0..dim * dh).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wk_b: Vec<f64> = (0..dim * dh).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rel_a: Vec<f64> = (0..(clip + 1) * dh).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rel_b: Vec<f64> = (0..(clip + 1) * dh).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let base = run(&wk_a, &rel_a);
        let rel_changed = run(&wk_a, &rel_b);
        let key_changed = run(&wk_b, &rel_a);

        let mut content_stable = 0.0f64;
        let mut position_stable = 0.0f64;
        let mut position_moved = 0.0f64;
        let mut content_moved = 0.0f64;
        for t in 0..l {
            for c in 0..dh {
                // content head occupies columns [0, dh)
                content_stable = content_stable
                    .max((base[t * dim + c] - rel_changed[t * dim + c]).abs());
                content_moved = content_moved
                    .max((base[t * dim + c] - key_changed[t * dim + c]).abs());
                // position head occupies columns [dh, 2 dh)
                position_stable = position_stable
                    .max((base[t * dim + dh + c] - key_changed[t * dim + dh + c]).abs());
                position_moved = position_moved
                    .max((base[t * dim + dh + c] - rel_changed[t * dim + dh + c]).abs());
            }
        }
        let ok = content_stable == 0.0
            && position_stable == 0.0
            && position_moved > 1e-6
            && content_moved > 1e-6;
        (
            ok,
            format!(
                "content head ignores relative embeddings (dev {content_stable:.1e}) and responds to keys (dev {content_moved:.1e}); position head ignores keys (dev {position_stable:.1e}) and responds to embeddings (dev {position_moved:.1e})"
            ),
        )
    });
}

// ── Model checks ────────────────────────────────────────────────────

fn model_checks(r: &mut Vec<CheckReport>, opts: &VerifyOptions) {
    check(r, "model_logits_finite_all_modes", || {
        let mut all_finite = true;
        for mode in EncodingMode::ALL {
            let cfg = small_model(mode);
            let store = ParamStore::<f64>::init(&cfg, opts.seed).unwrap();
            let fms = draw_feature_maps(&cfg, split(opts.seed, "finite"), 0).unwrap();
            let mut rng = chacha(split(opts.seed, "finite-img"));
            let mut tape: Tape<f64> = Tape::new();
            let leaves = LeafSet::insert_all(&mut tape, &store, false);
            let img = tape.constant(
                Tensor::new(
                    vec![2, cfg.seq_len(), 1],
                    (0..2 * cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap(),
            );
            let out = forward_with_offset(
                &mut tape,
                &leaves,
                &cfg,
                &fms,
                img,
                AttentionImpl::Favor,
                None,
                (0.0, 0.0),
            )
            .unwrap();
            let v = tape.value(out);
            all_finite &= v.shape() == [2, cfg.classes] && v.data().iter().all(|x| x.is_finite());
        }
        (all_finite, "shape preserved and logits finite in every mode".into())
    });

    check(r, "model_gradient_reaches_every_parameter", || {
        let mut ok = true;
        let mut detail = String::new();
        for seed in [1u64, 2, 3] {
            for mode in [EncodingMode::Absolute, EncodingMode::S1, EncodingMode::S2] {
                let cfg = small_model(mode);
                let store = ParamStore::<f64>::init(&cfg, seed).unwrap();
                let fms = draw_feature_maps(&cfg, seed + 50, 0).unwrap();
                let mut rng = chacha(seed + 99);
                let mut tape: Tape<f64> = Tape::new();
                let leaves = LeafSet::insert_all(&mut tape, &store, true);
                let img = tape.constant(
                    Tensor::new(
                        vec![2, cfg.seq_len(), 1],
                        (0..2 * cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    )
                    .unwrap(),
                );
                let out = forward_with_offset(
                    &mut tape,
                    &leaves,
                    &cfg,
                    &fms,
                    img,
                    AttentionImpl::Favor,
                    None,
                    (0.0, 0.0),
                )
                .unwrap();
                let loss = tape.cross_entropy(out, &[1, 2]).unwrap();
                tape.backward(loss).unwrap();
                for name in leaves.names() {
                    let dead = tape
                        .grad(leaves.var(name))
                        .map(|g| g.iter().all(|v| *v == 0.0))
                        .unwrap_or(true);
                    if dead {
                        ok = false;
                        detail = format!("{mode} seed {seed}: zero gradient at {name}");
                    }
                }
            }
        }
        if ok {
            detail = "3 seeds x 3 modes: no parameter with identically zero gradient".into();
        }
        (ok, detail)
    });

    check(r, "model_s1_shift_invariance_zero_content", || {
        // zero the content projections; on the exact oracle path the
        // logits must not depend on where the coordinate grid sits
        let cfg = small_model(EncodingMode::S1);
        let mut store = ParamStore::<f64>::init(&cfg, opts.seed).unwrap();
        for l in 0..cfg.depth {
            for part in ["attn.wq", "attn.bq", "attn.wk", "attn.bk"] {
                let name = format!("block{l}.{part}");
                let t = store.get_mut(&name);
                let zero = Tensor::zeros(t.shape().to_vec());
                *t = zero;
            }
        }
        let fms = draw_feature_maps(&cfg, split(opts.seed, "inv"), 0).unwrap();
        let mut rng = chacha(split(opts.seed, "inv-img"));
        let img = Tensor::<f64>::new(
            vec![1, cfg.seq_len(), 1],
            (0..cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let logits_at = |offset: (f64, f64)| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let leaves = LeafSet::insert_all(&mut tape, &store, false);
            let x = tape.constant(img.clone());
            let out = forward_with_offset(
                &mut tape,
                &leaves,
                &cfg,
                &fms,
                x,
                AttentionImpl::Exact,
                None,
                offset,
            )
            .unwrap();
            tape.value(out).data().to_vec()
        };
        let base = logits_at((0.0, 0.0));
        let mut worst = 0.0f64;
        for shift in [(1.0, 0.0), (0.0, 1.0), (5.0, -3.0), (-8.0, 8.0), (100.0, 41.0)] {
            let moved = logits_at(shift);
            for (a, b) in base.iter().zip(&moved) {
                worst = worst.max((a - b).abs());
            }
        }
        (
            worst <= 1e-10,
            format!("worst logit deviation under integer grid shifts: {worst:.3e} (exact path, content zeroed)"),
        )
    });
}

fn small_model(mode: EncodingMode) -> ModelConfig {
    ModelConfig {
        dim: 16,
        depth: 2,
        heads: 2,
        feature_count: 8,
        mode,
        clip: 2,
        dropout: 0.0,
        ffn_mult: 2,
        classes: 5,
        image_h: 3,
        image_w: 3,
        channels: 1,
        lengthscales: 2,
    }
}

// ── Optimizer, checkpoint, dataset-format checks ────────────────────


fn unique_temp_dir(tag: &str) -> std::path::PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!(
        "eqpf-verify-{tag}-{}-{n}",
        std::process::id()
    ));
    let _ = std::fs::create_dir_all(&dir);
    dir
}

fn optimizer_and_format_checks(r: &mut Vec<CheckReport>, opts: &VerifyOptions) {
    check(r, "adam_single_step_oracle", || {
        let mut store = ParamStore::<f64>::init(&small_model(EncodingMode::None), 0).unwrap();
        let before: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.data().to_vec()).collect();
        let grads: Vec<Vec<f64>> = store
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                (0..t.numel())
                    .map(|j| 0.05 * (i as f64 + 1.0) + 0.001 * j as f64 - 0.02)
                    .collect()
            })
            .collect();
        let mut adam = Adam::<f64>::new(1e-3);
        adam.step(&mut store, &grads);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64);
        let mut worst = 0.0f64;
        for (i, (_, t)) in store.iter().enumerate() {
            for (j, &after) in t.data().iter().enumerate() {
                let g = grads[i][j];
                let mhat = (1.0 - b1) * g / (1.0 - b1);
                let vhat = (1.0 - b2) * g * g / (1.0 - b2);
                let want = before[i][j] - lr * mhat / (vhat.sqrt() + eps);
                worst = worst.max((after - want).abs());
            }
        }
        (
            worst <= 1e-12,
            format!("single-step deviation from the hand-coded update: {worst:.3e}"),
        )
    });

    check(r, "checkpoint_roundtrip_bitwise", || {
        let cfg = small_model(EncodingMode::S2);
        let store = ParamStore::<f32>::init(&cfg, opts.seed).unwrap();
        let dir = unique_temp_dir("ck");
        let path = dir.join("ck.eqpf");
        save_checkpoint(&path, &store, u64::MAX - 12345, 9).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let back = ParamStore::<f32>::from_checkpoint(&cfg, &loaded).unwrap();
        let bitwise = store
            .iter()
            .zip(back.iter())
            .all(|((n1, t1), (n2, t2))| n1 == n2 && t1 == t2);
        let seeds_ok = loaded.favor_seed == u64::MAX - 12345 && loaded.draw_epoch == 9;
        let _ = std::fs::remove_dir_all(&dir);
        (
            bitwise && seeds_ok,
            format!("parameters bitwise identical: {bitwise}; 64-bit seed and epoch survive: {seeds_ok}"),
        )
    });

    check(r, "idx_format_contract", || {
        let dir = unique_temp_dir("idx");
        let images = vec![vec![0u8, 40, 90, 255], vec![1, 2, 3, 4]];
        let labels = vec![5u8, 0];
        let mut pieces = Vec::new();
        for gzip in [false, true] {
            let (ip, lp) = write_idx_fixture(&dir, &images, &labels, 2, 2, gzip).unwrap();
            let ds = load_idx(&ip, &lp).unwrap();
            let exact = ds.images.len() == 2
                && ds.images[0].label == 5
                && ds.images[0].pixels[1] == 40.0 / 255.0
                && ds.images[1].pixels[3] == 4.0 / 255.0;
            pieces.push(exact);
            // wrong magic when files are swapped
            let magic_err = matches!(load_idx(&lp, &lp), Err(DataError::BadMagic { .. }));
            pieces.push(magic_err);
        }
        // truncated payload
        let (ip, lp) = write_idx_fixture(&dir, &images, &labels, 2, 2, false).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        let cut = dir.join("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 1]).unwrap();
        pieces.push(matches!(
            load_idx(&cut, &lp),
            Err(DataError::Truncated { .. })
        ));
        // count mismatch
        let (_, lp1) = write_idx_fixture(&dir, &images, &[7u8], 2, 2, false).unwrap();
        pieces.push(matches!(
            load_idx(&ip, &lp1),
            Err(DataError::CountMismatch { .. })
        ));
        let _ = std::fs::remove_dir_all(&dir);
        let ok = pieces.iter().all(|&p| p);
        (
            ok,
            format!(
                "raw and gzip round-trips exact, wrong-magic / truncation / count-mismatch rejected ({pieces:?})"
            ),
        )
    });

    check(r, "cifar_format_contract", || {
        let dir = unique_temp_dir("cifar");
        let mut record = vec![3u8];
        record.extend((0..3072u32).map(|i| (i % 256) as u8));
        let path = dir.join("batch.bin");
        std::fs::write(&path, &record).unwrap();
        let ds = load_cifar10(&[path.clone()]).unwrap();
        let im = &ds.images[0];
        let roundtrip = im.label == 3
            && im.pixels[0] == 0.0
            && (im.pixels[3] - 1.0 / 255.0).abs() < 1e-12
            && (im.pixel(0, 0, 1) - 0.0).abs() < 1e-12;
        let bad = dir.join("bad.bin");
        std::fs::write(&bad, vec![0u8; 100]).unwrap();
        let rejected = matches!(
            load_cifar10(&[bad]),
            Err(DataError::BadRecordLength { .. })
        );
        let _ = std::fs::remove_dir_all(&dir);
        (
            roundtrip && rejected,
            format!("synthetic record round-trip exact: {roundtrip}; partial record rejected: {rejected}"),
        )
    });

    check(r, "bilinear_resize_oracle", || {
        // constants preserved, bounds respected, checkerboard matches an
        // independently coded interpolation
        let constant = LabeledImage {
            pixels: vec![0.37; 28 * 28],
            h: 28,
            w: 28,
            channels: 1,
            label: 0,
        };
        let cst = resize_bilinear(&constant, 32, 32);
        let constant_ok = cst.pixels.iter().all(|&v| (v - 0.37).abs() < 1e-12);

        let board = LabeledImage {
            pixels: (0..28 * 28)
                .map(|i| if ((i / 28) + (i % 28)) % 2 == 0 { 1.0 } else { 0.0 })
                .collect(),
            h: 28,
            w: 28,
            channels: 1,
            label: 0,
        };
        let got = resize_bilinear(&board, 14, 14);
        let mut worst = 0.0f64;
        for r_ in 0..14usize {
            for c_ in 0..14usize {
                let sy = (((r_ as f64) + 0.5) / 14.0 * 28.0 - 0.5).clamp(0.0, 27.0);
                let sx = (((c_ as f64) + 0.5) / 14.0 * 28.0 - 0.5).clamp(0.0, 27.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(27), (x0 + 1).min(27));
                let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                let want = board.pixel(y0, x0, 0) * (1.0 - dy) * (1.0 - dx)
                    + board.pixel(y1, x0, 0) * dy * (1.0 - dx)
                    + board.pixel(y0, x1, 0) * (1.0 - dy) * dx
                    + board.pixel(y1, x1, 0) * dy * dx;
                worst = worst.max((got.pixel(r_, c_, 0) - want).abs());
            }
        }
        let bounded = got.pixels.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v));
        (
            constant_ok && worst < 1e-6 && bounded,
            format!("constant preserved: {constant_ok}; checkerboard vs oracle worst {worst:.2e}; output bounded: {bounded}"),
        )
    });

    check(r, "shift_mass_preservation_and_inverse", || {
        let mut pixels = vec![0.0; 32 * 32];
        for c in 10..22 {
            pixels[15 * 32 + c] = 0.25 + 0.01 * c as f64;
        }
        let img = LabeledImage {
            pixels,
            h: 32,
            w: 32,
            channels: 1,
            label: 1,
        };
        let eligible = is_shiftable(&img, 8);
        let mut mass_ok = true;
        for off in -8i64..=8 {
            mass_ok &= shift_x(&img, off).unwrap().mass() == img.mass();
        }
        let inverse_ok = shift_x(&shift_x(&img, 5).unwrap(), -5).unwrap() == img;
        let subset = select_shiftable(std::slice::from_ref(&img), 1, 8).unwrap();
        (
            eligible && mass_ok && inverse_ok && subset == vec![0],
            format!("eligible: {eligible}, mass exact over [-8, 8]: {mass_ok}, shift round-trip exact: {inverse_ok}"),
        )
    });

    check(r, "shuffle_deterministic_given_seed", || {
        let ds = Dataset {
            images: vec![
                LabeledImage {
                    pixels: vec![0.0; 4],
                    h: 2,
                    w: 2,
                    channels: 1,
                    label: 0,
                };
                64
            ],
            sha256: String::new(),
        };
        let same = ds.shuffled_indices(9) == ds.shuffled_indices(9);
        let differ = ds.shuffled_indices(9) != ds.shuffled_indices(10);
        (same && differ, format!("same seed identical: {same}; different seed differs: {differ}"))
    });

    check(r, "clamp_helper_sign_preserving", || {
        let cases = [
            (5.0, 5.0),
            (-5.0, -5.0),
            (1e-9, DENOM_EPS),
            (-1e-9, -DENOM_EPS),
            (0.0, DENOM_EPS),
        ];
        let ok = cases
            .iter()
            .all(|&(x, want)| clamp_denominator(x, DENOM_EPS) == want);
        (ok, "magnitude clamp keeps the denominator's sign".into())
    });
    let _ = opts;
}
