//! Wall-clock scaling measurements: quadratic exact attention versus the
//! linear kernel path, and the naive versus fast clipped relative sums.
//! Used by the `bench` subcommand and the scaling acceptance checks.

use std::time::Instant;

use rand::Rng;

use crate::attention::{
    exact_attention, linear_attention, s2_position_attention_fast, s2_position_attention_naive,
    DENOM_EPS,
};
use crate::favor::{phi_features, FeatureMap};
use crate::positional::{build_neighbor_map, PixelCoords};
use crate::rng::chacha;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct AttentionScalingRow {
    pub l: usize,
    pub exact_secs: f64,
    pub linear_secs: f64,
    /// Largest single tape buffer (elements) on each path: the
    /// peak-allocation proxy.
    pub exact_peak_numel: usize,
    pub linear_peak_numel: usize,
    /// Whether any buffer on the linear path had trailing dims `[l, l]`.
    pub linear_has_square: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Time exact and linear attention over sequence lengths `ls` with fixed
/// feature count `m` and head dimension `d`. Each timing is the median of
/// `reps` runs after one warmup; tape construction is included since it
/// is part of the real execution path.
pub fn measure_attention_scaling(
    ls: &[usize],
    m: usize,
    d: usize,
    reps: usize,
    seed: u64,
) -> Vec<AttentionScalingRow> {
    let fm = FeatureMap::draw(seed, 0, m, d).unwrap();
    let mut rows = Vec::with_capacity(ls.len());
    for &l in ls {
        let mut rng = chacha(seed ^ l as u64);
        let q = random_matrix(&mut rng, l, d, 0.5);
        let k = random_matrix(&mut rng, l, d, 0.5);
        let v = random_matrix(&mut rng, l, d, 1.0);

        let run_exact = || {
            let mut tape: Tape<f64> = Tape::new();
            let qv = tape.constant(q.clone());
            let kv = tape.constant(k.clone());
            let vv = tape.constant(v.clone());
            let out = exact_attention(&mut tape, qv, kv, vv).unwrap();
            let first = tape.value(out).data()[0];
            (tape.peak_node_numel(), first)
        };
        let run_linear = || {
            let mut tape: Tape<f64> = Tape::new();
            let qv = tape.constant(q.clone());
            let kv = tape.constant(k.clone());
            let vv = tape.constant(v.clone());
            let qf = phi_features(&mut tape, qv, &fm).unwrap();
            let kf = phi_features(&mut tape, kv, &fm).unwrap();
            let out = linear_attention(&mut tape, qf, kf, vv, DENOM_EPS).unwrap();
            let first = tape.value(out).data()[0];
            (tape.peak_node_numel(), first, tape.has_square_node(l))
        };

        let (exact_peak, _) = run_exact();
        let (linear_peak, _, linear_has_square) = run_linear();

        let mut exact_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(run_exact());
            exact_times.push(t0.elapsed().as_secs_f64());
        }
        let mut linear_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(run_linear());
            linear_times.push(t0.elapsed().as_secs_f64());
        }
        rows.push(AttentionScalingRow {
            l,
            exact_secs: median(exact_times),
            linear_secs: median(linear_times),
            exact_peak_numel: exact_peak,
            linear_peak_numel: linear_peak,
            linear_has_square,
        });
    }
    rows
}

#[derive(Debug, Clone)]
pub struct S2ScalingRow {
    pub l: usize,
    pub clip: usize,
    pub naive_secs: f64,
    pub fast_secs: f64,
    pub max_abs_diff: f64,
}

/// Time the naive quadratic relative-position sum against the fast
/// neighborhood form on an `h x w` grid for each clipping distance, and
/// record their maximum output deviation.
pub fn measure_s2_scaling(
    h: usize,
    w: usize,
    clips: &[usize],
    m: usize,
    d_head: usize,
    reps: usize,
    seed: u64,
) -> Vec<S2ScalingRow> {
    let coords = PixelCoords::new(h, w);
    let l = coords.len();
    let mut out = Vec::with_capacity(clips.len());
    for &clip in clips {
        let mut rng = chacha(seed ^ (clip as u64) << 8);
        let fm = FeatureMap::draw(seed + clip as u64, 0, m, d_head).unwrap();
        let q: Vec<f64> = (0..l * d_head).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wt: Vec<f64> = (0..(clip + 1) * d_head)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let v: Vec<f64> = (0..l * d_head).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qf: Vec<f64> = q
            .chunks(d_head)
            .flat_map(|r| fm.phi_vec(r).unwrap())
            .collect();
        let wf: Vec<f64> = wt
            .chunks(d_head)
            .flat_map(|r| fm.phi_vec(r).unwrap())
            .collect();
        let map = build_neighbor_map(&coords, clip);

        let (naive_out, naive_den) =
            s2_position_attention_naive(&qf, &wf, &coords, clip, &v, DENOM_EPS);
        let (fast_out, fast_den) = s2_position_attention_fast(&qf, &wf, &map, &v, DENOM_EPS);
        let mut max_diff = 0.0f64;
        for (a, b) in naive_out.iter().zip(&fast_out) {
            max_diff = max_diff.max((a - b).abs());
        }
        for (a, b) in naive_den.iter().zip(&fast_den) {
            max_diff = max_diff.max((a - b).abs());
        }

        let mut naive_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(s2_position_attention_naive(
                &qf, &wf, &coords, clip, &v, DENOM_EPS,
            ));
            naive_times.push(t0.elapsed().as_secs_f64());
        }
        let mut fast_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            std::hint::black_box(s2_position_attention_fast(&qf, &wf, &map, &v, DENOM_EPS));
            fast_times.push(t0.elapsed().as_secs_f64());
        }
        out.push(S2ScalingRow {
            l,
            clip,
            naive_secs: median(naive_times),
            fast_secs: median(fast_times),
            max_abs_diff: max_diff,
        });
    }
    out
}

/// Consecutive-doubling time ratios, e.g. `[t(512)/t(256), ..]`.
pub fn doubling_ratios(rows: &[AttentionScalingRow], pick: impl Fn(&AttentionScalingRow) -> f64) -> Vec<f64> {
    rows.windows(2)
        .map(|w| pick(&w[1]) / pick(&w[0]).max(1e-12))
        .collect()
}
