//! Attention computations.
//!
//! Three routes over per-head tensors `[.., l, d_head]`:
//!
//! - [`exact_attention`]: the quadratic softmax reference. It materializes
//!   the full `l x l` matrix and serves as the convergence oracle for the
//!   linear path.
//! - [`linear_attention`]: kernel-space attention over feature-mapped
//!   queries/keys. Associativity lets `K'^T V` be formed first, so cost is
//!   linear in `l` and no `l x l` array ever exists; rows are normalized
//!   by `q'_i . (K'^T 1)` with an epsilon clamp.
//! - the clipped relative-position route (strategy 2), in a deliberately
//!   naive quadratic form kept as the oracle, and the `O(l k^2)` fast form
//!   that splits the sum into a global far-bucket term plus a neighborhood
//!   correction.
//!
//! [`multi_head_attention`] projects per head, routes content heads
//! through the linear path and position heads through the fast relative
//! path, and concatenates through the output projection.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::favor::{phi_features, FeatureMap};
use crate::positional::{s1_axis_features_tape, EncodingMode, PixelCoords};
use crate::tensor::{
    Element, ReduceKind, Result, S2NeighborMap, Tape, Tensor, TensorError, Var,
};

/// Row-normalization clamp for kernel-space attention denominators.
pub const DENOM_EPS: f64 = 1e-6;

/// Sign-preserving magnitude clamp used by every kernel-space
/// normalization: denominators smaller than `eps` in magnitude divide by
/// `eps` with their original sign.
pub fn clamp_denominator(den: f64, eps: f64) -> f64 {
    if den.abs() < eps {
        if den < 0.0 {
            -eps
        } else {
            eps
        }
    } else {
        den
    }
}

/// Which route the content heads take; `Exact` is the oracle path used by
/// verification and convergence checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionImpl {
    Favor,
    Exact,
}

/// Assignment of heads to the content term and the position term of the
/// decomposed pre-attention sum. Outside strategy 2 every head is a
/// content head; in strategy 2 the split is half and half.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadLayout {
    pub total: usize,
    pub content: Vec<usize>,
    pub position: Vec<usize>,
}

impl HeadLayout {
    pub fn for_mode(mode: EncodingMode, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(TensorError::Invalid {
                op: "head_layout",
                detail: "head count must be positive".into(),
            });
        }
        match mode {
            EncodingMode::S2 => {
                if total % 2 != 0 {
                    return Err(TensorError::Invalid {
                        op: "head_layout",
                        detail: format!("strategy 2 needs an even head count, got {total}"),
                    });
                }
                Ok(HeadLayout {
                    total,
                    content: (0..total / 2).collect(),
                    position: (total / 2..total).collect(),
                })
            }
            _ => Ok(HeadLayout {
                total,
                content: (0..total).collect(),
                position: vec![],
            }),
        }
    }
}

/// Exact softmax attention `softmax(Q K^T / sqrt(d_head)) V`.
pub fn exact_attention<E: Element>(tape: &mut Tape<E>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *tape.shape(q).last().ok_or_else(|| TensorError::Invalid {
        op: "exact_attention",
        detail: "rank must be at least 2".into(),
    })?;
    exact_attention_scaled(tape, q, k, v, 1.0 / (d as f64).sqrt())
}

/// Exact softmax attention with an explicit logit scale (callers that
/// pre-scale their queries/keys pass 1.0).
pub fn exact_attention_scaled<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
) -> Result<Var> {
    let kt = tape.transpose_last(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = if scale != 1.0 {
        tape.scale(logits, scale)?
    } else {
        logits
    };
    let weights = tape.softmax_rows(logits)?;
    tape.matmul(weights, v)
}

/// Kernel-space attention over feature rows `qp/kp[.., l, f]` and values
/// `v[.., l, d]`:
///
/// `out_i = q'_i (K'^T V) / max(q'_i (K'^T 1), eps)`
///
/// Cost is `O(l * f * d)`; no `l x l` intermediate is allocated, which
/// [`Tape::has_square_node`] audits structurally.
pub fn linear_attention<E: Element>(
    tape: &mut Tape<E>,
    qp: Var,
    kp: Var,
    v: Var,
    eps: f64,
) -> Result<Var> {
    let rank = tape.shape(kp).len();
    if rank < 2 {
        return Err(TensorError::Invalid {
            op: "linear_attention",
            detail: "feature tensors must be rank 2 or higher".into(),
        });
    }
    let kv = tape.matmul_tn(kp, v)?;
    let num = tape.matmul(qp, kv)?;
    let ksum = tape.reduce(ReduceKind::Sum, kp, Some(rank - 2))?;
    let f = *tape.shape(kp).last().unwrap();
    let mut col_shape = tape.shape(ksum).to_vec();
    let pos = col_shape.len() - 1;
    debug_assert_eq!(col_shape[pos], f);
    col_shape.push(1);
    let ksum_col = tape.reshape(ksum, col_shape)?;
    let den = tape.matmul(qp, ksum_col)?;
    tape.div_rows_clamped(num, den, eps)
}

// ── Strategy-2 position attention ───────────────────────────────────

/// Quadratic reference for relative-position attention, written as the
/// plainest possible double loop. `q_feat` is `[l, f]`, `w_feat` is the
/// feature-mapped embedding table `[k+1, f]`, `v` is `[l, d]`. Returns the
/// normalized output and the pre-clamp denominators.
pub fn s2_position_attention_naive(
    q_feat: &[f64],
    w_feat: &[f64],
    coords: &PixelCoords,
    clip: usize,
    v: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let l = coords.len();
    let f = q_feat.len() / l;
    let d = v.len() / l;
    let mut out = vec![0.0; l * d];
    let mut dens = vec![0.0; l];
    for i in 0..l {
        let qi = &q_feat[i * f..(i + 1) * f];
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..l {
            let c = coords.l1(i, j).min(clip);
            let wc = &w_feat[c * f..(c + 1) * f];
            let mut s = 0.0;
            for (a, b) in qi.iter().zip(wc) {
                s += a * b;
            }
            for (n, &x) in num.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *n += s * x;
            }
            den += s;
        }
        let eff = clamp_denominator(den, eps);
        for (o, n) in out[i * d..(i + 1) * d].iter_mut().zip(&num) {
            *o = n / eff;
        }
        dens[i] = den;
    }
    (out, dens)
}

/// Fast form of the relative-position sum: the shared far-bucket score
/// times the global value sum, corrected over the `O(k^2)` neighborhood
/// where the clipped distance differs. Identical in value to the naive
/// double loop at `O(l k^2)` cost. Returns output and pre-clamp
/// denominators.
pub fn s2_position_attention_fast(
    q_feat: &[f64],
    w_feat: &[f64],
    map: &S2NeighborMap,
    v: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let l = map.per_token.len();
    let f = q_feat.len() / l;
    let k1 = map.clip + 1;
    let d = v.len() / l;
    // bucket scores p[i, c] = <q'_i, w'_c>
    let mut p = vec![0.0; l * k1];
    for i in 0..l {
        let qi = &q_feat[i * f..(i + 1) * f];
        for c in 0..k1 {
            let wc = &w_feat[c * f..(c + 1) * f];
            let mut s = 0.0;
            for (a, b) in qi.iter().zip(wc) {
                s += a * b;
            }
            p[i * k1 + c] = s;
        }
    }
    let mut sum_v = vec![0.0; d];
    for row in v.chunks(d) {
        for (s, &x) in sum_v.iter_mut().zip(row) {
            *s += x;
        }
    }
    let mut out = vec![0.0; l * d];
    let mut dens = vec![0.0; l];
    for i in 0..l {
        let base = p[i * k1 + k1 - 1];
        let mut num: Vec<f64> = sum_v.iter().map(|&s| base * s).collect();
        let mut den = base * l as f64;
        for &(j, dist) in &map.per_token[i] {
            let delta = p[i * k1 + dist as usize] - base;
            for (n, &x) in num.iter_mut().zip(&v[j as usize * d..(j as usize + 1) * d]) {
                *n += delta * x;
            }
            den += delta;
        }
        let eff = clamp_denominator(den, eps);
        for (o, n) in out[i * d..(i + 1) * d].iter_mut().zip(&num) {
            *o = n / eff;
        }
        dens[i] = den;
    }
    (out, dens)
}

/// Tape (differentiable) version of the fast relative-position path.
/// `q_feat[.., l, f]`, `w_feat[k+1, f]`, `v[.., l, d]`.
pub fn s2_position_attention_fast_tape<E: Element>(
    tape: &mut Tape<E>,
    q_feat: Var,
    w_feat: Var,
    map: &Arc<S2NeighborMap>,
    v: Var,
    eps: f64,
) -> Result<Var> {
    let vsh = tape.shape(v).to_vec();
    let rank = vsh.len();
    let d = vsh[rank - 1];
    let l = vsh[rank - 2];
    // p[.., l, k+1] bucket scores; appending a ones column to the values
    // lets one neighborhood pass produce both the numerator and the
    // denominator.
    let wt = tape.transpose_last(w_feat)?;
    let p = tape.matmul(q_feat, wt)?;
    let mut ones_shape = vsh.clone();
    ones_shape[rank - 1] = 1;
    let ones = tape.constant(Tensor::full(ones_shape, E::one()));
    let v1 = tape.concat(&[v, ones], rank - 1)?;
    let combined = tape.s2_neighborhood(p, v1, map)?;
    let num = tape.narrow(combined, rank - 1, 0, d)?;
    let den = tape.narrow(combined, rank - 1, d, 1)?;
    let _ = l;
    tape.div_rows_clamped(num, den, eps)
}

// ── Multi-head orchestration ────────────────────────────────────────

/// Projection weights for one attention layer, already inserted on the
/// tape. `wk` covers content heads only (position heads never use keys).
pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    /// Strategy-1 lengthscale/rotation parameters per axis, each var of
    /// shape `[heads, ml]`: (omega, alpha, beta) for rows, then columns.
    pub s1_row: Option<(Var, Var, Var)>,
    pub s1_col: Option<(Var, Var, Var)>,
    /// Strategy-2 embedding tables `[clip+1, d_head]`, one per position
    /// head (in `HeadLayout::position` order).
    pub rel_w: Vec<Var>,
}

/// Everything the layer needs besides weights.
pub struct AttnContext<'a> {
    pub mode: EncodingMode,
    pub layout: &'a HeadLayout,
    pub d_head: usize,
    pub coords: &'a PixelCoords,
    /// One feature map per head.
    pub feature_maps: &'a [FeatureMap],
    pub neighbor_map: Option<&'a Arc<S2NeighborMap>>,
    pub implementation: AttentionImpl,
    pub eps: f64,
    /// Constant offset added to the strategy-1 coordinate values; the
    /// shift-invariance checks verify outputs do not depend on it.
    pub s1_coord_offset: (f64, f64),
}

/// Feature-level dropout state (the attention matrix is never
/// materialized on the linear path, so regularization lands on the
/// feature rows instead).
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

/// Multi-head attention over `x[.., l, dim]`: per-head projections, the
/// mode's attention route per head, concatenation, output projection.
pub fn multi_head_attention<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    params: &AttnParams,
    ctx: &AttnContext,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let xsh = tape.shape(x).to_vec();
    let rank = xsh.len();
    if rank < 2 {
        return Err(TensorError::Invalid {
            op: "multi_head_attention",
            detail: format!("input must be rank 2 or 3, got {xsh:?}"),
        });
    }
    let dim = xsh[rank - 1];
    let heads = ctx.layout.total;
    let dh = ctx.d_head;
    if heads * dh != dim {
        return Err(TensorError::Invalid {
            op: "multi_head_attention",
            detail: format!("dim {dim} not divisible into {heads} heads of {dh}"),
        });
    }
    if ctx.feature_maps.len() != heads {
        return Err(TensorError::Invalid {
            op: "multi_head_attention",
            detail: format!(
                "expected {heads} feature maps, got {}",
                ctx.feature_maps.len()
            ),
        });
    }
    let batch = if rank == 3 { Some(xsh[0]) } else { None };
    // The softmax temperature 1/sqrt(d_head) is folded into the features:
    // scaling q and k by d_head^(-1/4) before the map makes <phi(q),
    // phi(k)> estimate exp(q.k / sqrt(d_head)).
    let temp = (dh as f64).powf(-0.25);

    let q_all = {
        let p = tape.matmul(x, params.wq)?;
        tape.add_row(p, params.bq)?
    };
    let k_all = {
        let p = tape.matmul(x, params.wk)?;
        tape.add_row(p, params.bk)?
    };
    let v_all = {
        let p = tape.matmul(x, params.wv)?;
        tape.add_row(p, params.bv)?
    };

    // Strategy-1 positional feature rows, shared by every content head's
    // axis but with per-head learned parameters.
    let s1_coords = if ctx.mode == EncodingMode::S1 {
        let rz = ctx
            .coords
            .axis_values(crate::positional::Axis::Row, ctx.s1_coord_offset.0);
        let cz = ctx
            .coords
            .axis_values(crate::positional::Axis::Col, ctx.s1_coord_offset.1);
        let l = ctx.coords.len();
        let rzv = tape.constant(Tensor::from_f64_slice(vec![l], &rz)?);
        let czv = tape.constant(Tensor::from_f64_slice(vec![l], &cz)?);
        Some((rzv, czv))
    } else {
        None
    };

    let mut head_outputs = Vec::with_capacity(heads);
    let mut position_cursor = 0usize;
    for h in 0..heads {
        let q_h = tape.narrow(q_all, rank - 1, h * dh, dh)?;
        let v_h = tape.narrow(v_all, rank - 1, h * dh, dh)?;
        let q_h = tape.scale(q_h, temp)?;
        let is_content = ctx.layout.content.contains(&h);
        let out_h = if is_content {
            let slot = ctx.layout.content.iter().position(|&c| c == h).unwrap();
            let k_h = tape.narrow(k_all, rank - 1, slot * dh, dh)?;
            let k_h = tape.scale(k_h, temp)?;
            let (q_in, k_in) = if ctx.mode == EncodingMode::S1 {
                let (rzv, czv) = s1_coords.unwrap();
                let (wr, ar, br) = head_row(tape, params.s1_row, h)?;
                let (wc, ac, bc) = head_row(tape, params.s1_col, h)?;
                let (qp_r, kp_r) = s1_axis_features_tape(tape, rzv, wr, ar, br)?;
                let (qp_c, kp_c) = s1_axis_features_tape(tape, czv, wc, ac, bc)?;
                let qp = tape.concat(&[qp_r, qp_c], 1)?;
                let kp = tape.concat(&[kp_r, kp_c], 1)?;
                let (qp, kp) = match batch {
                    Some(b) => (tape.repeat_batch(qp, b)?, tape.repeat_batch(kp, b)?),
                    None => (qp, kp),
                };
                (
                    tape.concat(&[q_h, qp], rank - 1)?,
                    tape.concat(&[k_h, kp], rank - 1)?,
                )
            } else {
                (q_h, k_h)
            };
            match ctx.implementation {
                AttentionImpl::Favor => {
                    let fm = &ctx.feature_maps[h];
                    let mut qf = phi_features(tape, q_in, fm)?;
                    let mut kf = phi_features(tape, k_in, fm)?;
                    if let Some(d) = &mut dropout {
                        qf = tape.dropout(qf, d.p, &mut d.rng)?;
                        kf = tape.dropout(kf, d.p, &mut d.rng)?;
                    }
                    linear_attention(tape, qf, kf, v_h, ctx.eps)?
                }
                AttentionImpl::Exact => exact_attention_scaled(tape, q_in, k_in, v_h, 1.0)?,
            }
        } else {
            // Position head: kernel weights between the query and the
            // clipped relative embedding, no key involvement.
            let w_table = params.rel_w[position_cursor];
            position_cursor += 1;
            let map = ctx.neighbor_map.ok_or_else(|| TensorError::Invalid {
                op: "multi_head_attention",
                detail: "position heads need a neighbor map".into(),
            })?;
            match ctx.implementation {
                AttentionImpl::Favor => {
                    let fm = &ctx.feature_maps[h];
                    let mut qf = phi_features(tape, q_h, fm)?;
                    let mut wf = phi_features(tape, w_table, fm)?;
                    if let Some(d) = &mut dropout {
                        qf = tape.dropout(qf, d.p, &mut d.rng)?;
                        wf = tape.dropout(wf, d.p, &mut d.rng)?;
                    }
                    s2_position_attention_fast_tape(tape, qf, wf, map, v_h, ctx.eps)?
                }
                AttentionImpl::Exact => {
                    exact_position_attention(tape, q_h, w_table, map, ctx.coords, v_h)?
                }
            }
        };
        head_outputs.push(out_h);
    }
    let merged = tape.concat(&head_outputs, rank - 1)?;
    let projected = tape.matmul(merged, params.wo)?;
    tape.add_row(projected, params.bo)
}

fn head_row<E: Element>(
    tape: &mut Tape<E>,
    vars: Option<(Var, Var, Var)>,
    head: usize,
) -> Result<(Var, Var, Var)> {
    let (w, a, b) = vars.ok_or_else(|| TensorError::Invalid {
        op: "multi_head_attention",
        detail: "strategy 1 requires lengthscale parameters".into(),
    })?;
    let ml = tape.shape(w)[1];
    let take = |tape: &mut Tape<E>, v: Var| -> Result<Var> {
        let row = tape.narrow(v, 0, head, 1)?;
        tape.reshape(row, vec![ml])
    };
    Ok((take(tape, w)?, take(tape, a)?, take(tape, b)?))
}

/// Oracle route for a position head: softmax over the kernel logits
/// `q_i . w_{clip(d(i,j))}`, materializing the quadratic matrix. Built
/// from bucket scores and constant one-hot distance masks so it stays
/// differentiable.
fn exact_position_attention<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    w_table: Var,
    map: &Arc<S2NeighborMap>,
    coords: &PixelCoords,
    v: Var,
) -> Result<Var> {
    let l = coords.len();
    let k1 = map.clip + 1;
    let wt = tape.transpose_last(w_table)?;
    let scores = tape.matmul(q, wt)?; // [.., l, k+1]
    let rank = tape.shape(scores).len();
    let mut logits: Option<Var> = None;
    for c in 0..k1 {
        let mut mask = vec![E::zero(); l * l];
        for i in 0..l {
            for j in 0..l {
                if coords.l1(i, j).min(map.clip) == c {
                    mask[i * l + j] = E::one();
                }
            }
        }
        let mask = tape.constant(Tensor::new(vec![l, l], mask)?);
        let mask = if rank == 3 {
            let b = tape.shape(scores)[0];
            tape.repeat_batch(mask, b)?
        } else {
            mask
        };
        let s_c = tape.narrow(scores, rank - 1, c, 1)?;
        let term = tape.scale_rows(mask, s_c)?;
        logits = Some(match logits {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let weights = tape.softmax_rows(logits.unwrap())?;
    tape.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::positional::build_neighbor_map;
    use rand::Rng;

    fn constant<const N: usize>(tape: &mut Tape<f64>, shape: [usize; N], data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn exact_attention_single_token_returns_values() {
        let mut t: Tape<f64> = Tape::new();
        let q = constant(&mut t, [1, 3], vec![0.3, -0.7, 2.0]);
        let k = constant(&mut t, [1, 3], vec![1.0, 0.0, -1.0]);
        let v = constant(&mut t, [1, 3], vec![5.0, 6.0, 7.0]);
        let o = exact_attention(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(o).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn exact_attention_identical_keys_average_values() {
        let mut t: Tape<f64> = Tape::new();
        let q = constant(&mut t, [2, 2], vec![0.5, -0.25, 1.0, 2.0]);
        let k = constant(&mut t, [2, 2], vec![0.3, 0.9, 0.3, 0.9]);
        let v = constant(&mut t, [2, 2], vec![2.0, 4.0, 6.0, 8.0]);
        let o = exact_attention(&mut t, q, k, v).unwrap();
        for row in t.value(o).data().chunks(2) {
            assert!((row[0] - 4.0).abs() < 1e-12);
            assert!((row[1] - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_attention_matches_double_loop_oracle() {
        let mut rng = crate::rng::chacha(5);
        let (l, d) = (16, 8);
        let q: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // independent double-loop softmax attention
        let mut want = vec![0.0; l * d];
        for i in 0..l {
            let mut logits = vec![0.0; l];
            for j in 0..l {
                let mut s = 0.0;
                for a in 0..d {
                    s += q[i * d + a] * k[j * d + a];
                }
                logits[j] = s / (d as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..l {
                let w = exps[j] / z;
                for a in 0..d {
                    want[i * d + a] += w * v[j * d + a];
                }
            }
        }

        let mut t: Tape<f64> = Tape::new();
        let qv = constant(&mut t, [16, 8], q);
        let kv = constant(&mut t, [16, 8], k);
        let vv = constant(&mut t, [16, 8], v);
        let o = exact_attention(&mut t, qv, kv, vv).unwrap();
        for (got, want) in t.value(o).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_attention_single_token_returns_values() {
        let fm = FeatureMap::draw(3, 0, 16, 4).unwrap();
        let mut t: Tape<f64> = Tape::new();
        let q = constant(&mut t, [1, 4], vec![0.1, 0.2, -0.3, 0.4]);
        let k = constant(&mut t, [1, 4], vec![-0.5, 0.2, 0.0, 0.9]);
        let v = constant(&mut t, [1, 3], vec![3.0, -1.0, 2.0]);
        let qf = phi_features(&mut t, q, &fm).unwrap();
        let kf = phi_features(&mut t, k, &fm).unwrap();
        let o = linear_attention(&mut t, qf, kf, v, DENOM_EPS).unwrap();
        for (got, want) in t.value(o).data().iter().zip(&[3.0, -1.0, 2.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn linear_paths_never_materialize_square_nodes() {
        let fm = FeatureMap::draw(3, 0, 8, 4).unwrap();
        let l = 32;
        let mut rng = crate::rng::chacha(11);
        let mut t: Tape<f64> = Tape::new();
        let data = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };
        let q = constant(&mut t, [l, 4], data(&mut rng, l * 4));
        let k = constant(&mut t, [l, 4], data(&mut rng, l * 4));
        let v = constant(&mut t, [l, 4], data(&mut rng, l * 4));
        let qf = phi_features(&mut t, q, &fm).unwrap();
        let kf = phi_features(&mut t, k, &fm).unwrap();
        let _ = linear_attention(&mut t, qf, kf, v, DENOM_EPS).unwrap();
        assert!(!t.has_square_node(l));
    }

    #[test]
    fn s2_fast_equals_naive_k1() {
        let coords = PixelCoords::new(4, 4);
        let map = build_neighbor_map(&coords, 1);
        let l = coords.len();
        let fm = FeatureMap::draw(9, 0, 4, 3).unwrap();
        let mut rng = crate::rng::chacha(2);
        let q: Vec<f64> = (0..l * 3).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let w: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let v: Vec<f64> = (0..l * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qf: Vec<f64> = q.chunks(3).flat_map(|r| fm.phi_vec(r).unwrap()).collect();
        let wf: Vec<f64> = w.chunks(3).flat_map(|r| fm.phi_vec(r).unwrap()).collect();
        let (o1, d1) = s2_position_attention_naive(&qf, &wf, &coords, 1, &v, DENOM_EPS);
        let (o2, d2) = s2_position_attention_fast(&qf, &wf, &map, &v, DENOM_EPS);
        for (a, b) in o1.iter().zip(&o2) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in d1.iter().zip(&d2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn s2_fast_equals_naive_random_instance() {
        let coords = PixelCoords::new(8, 8);
        let clip = 6;
        let map = build_neighbor_map(&coords, clip);
        let l = coords.len();
        let fm = FeatureMap::draw(17, 0, 8, 4).unwrap();
        let mut rng = crate::rng::chacha(21);
        let q: Vec<f64> = (0..l * 4).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let w: Vec<f64> = (0..(clip + 1) * 4).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let v: Vec<f64> = (0..l * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qf: Vec<f64> = q.chunks(4).flat_map(|r| fm.phi_vec(r).unwrap()).collect();
        let wf: Vec<f64> = w.chunks(4).flat_map(|r| fm.phi_vec(r).unwrap()).collect();
        let (o1, d1) = s2_position_attention_naive(&qf, &wf, &coords, clip, &v, DENOM_EPS);
        let (o2, d2) = s2_position_attention_fast(&qf, &wf, &map, &v, DENOM_EPS);
        for (a, b) in o1.iter().zip(&o2) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in d1.iter().zip(&d2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn s2_tape_path_matches_plain_fast_path() {
        let coords = PixelCoords::new(5, 5);
        let clip = 3;
        let map = build_neighbor_map(&coords, clip);
        let l = coords.len();
        let fm = FeatureMap::draw(31, 0, 6, 4).unwrap();
        let mut rng = crate::rng::chacha(4);
        let q: Vec<f64> = (0..l * 4).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let w: Vec<f64> = (0..(clip + 1) * 4).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let v: Vec<f64> = (0..l * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qf: Vec<f64> = q.chunks(4).flat_map(|r| fm.phi_vec(r).unwrap()).collect();
        let wf: Vec<f64> = w.chunks(4).flat_map(|r| fm.phi_vec(r).unwrap()).collect();
        let (want, _) = s2_position_attention_fast(&qf, &wf, &map, &v, DENOM_EPS);

        let mut t: Tape<f64> = Tape::new();
        let qfv = constant(&mut t, [25, 12], qf);
        let wfv = constant(&mut t, [4, 12], wf);
        let vv = constant(&mut t, [25, 3], v);
        let o = s2_position_attention_fast_tape(&mut t, qfv, wfv, &map, vv, DENOM_EPS).unwrap();
        for (got, want) in t.value(o).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn head_layout_partitions() {
        let hl = HeadLayout::for_mode(EncodingMode::S2, 8).unwrap();
        assert_eq!(hl.content, vec![0, 1, 2, 3]);
        assert_eq!(hl.position, vec![4, 5, 6, 7]);
        assert!(HeadLayout::for_mode(EncodingMode::S2, 5).is_err());
        let hl = HeadLayout::for_mode(EncodingMode::Absolute, 3).unwrap();
        assert_eq!(hl.content.len(), 3);
        assert!(hl.position.is_empty());
    }
}
