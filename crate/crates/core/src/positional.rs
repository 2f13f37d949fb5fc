//! Positional encodings.
//!
//! Three constructions over a 2D pixel grid:
//!
//! - absolute sinusoidal encodings added to the input embedding;
//! - strategy 1: sinusoidal features per learned lengthscale, with the
//!   query projection constrained to rotation-scaling blocks
//!   `[[a, b], [-b, a]]` (keys use the identity). Under that constraint
//!   the pre-attention inner product depends only on coordinate
//!   differences: `<qp(z), kp(z')> = a*cos(w(z-z')) + b*sin(w(z-z'))`,
//!   exactly, for any shift of both positions. An unconstrained 2x2 block
//!   breaks the identity, which the verification suite uses as a negative
//!   control.
//! - strategy 2: learned embeddings `w_0..w_k` indexed by the L1 pixel
//!   distance clipped at `k`.
//!
//! Feature layout for strategy 1 is `[sin block | cos block]` per axis,
//! axes concatenated (row first). Inner products are invariant to any
//! consistent column permutation, so this differs from an interleaved
//! per-lengthscale layout only in storage order.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::tensor::{Element, Result, S2NeighborMap, Tape, Tensor, TensorError, Var};

/// Positional-encoding variant of a model. Mirrors the four compared
/// configurations: no positional information, absolute sinusoidal
/// encodings, and the two relative strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingMode {
    None,
    Absolute,
    S1,
    S2,
}

impl EncodingMode {
    pub const ALL: [EncodingMode; 4] = [
        EncodingMode::None,
        EncodingMode::Absolute,
        EncodingMode::S1,
        EncodingMode::S2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncodingMode::None => "none",
            EncodingMode::Absolute => "absolute",
            EncodingMode::S1 => "s1",
            EncodingMode::S2 => "s2",
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(EncodingMode::None),
            "absolute" => Ok(EncodingMode::Absolute),
            "s1" => Ok(EncodingMode::S1),
            "s2" => Ok(EncodingMode::S2),
            other => Err(format!(
                "unknown encoding mode {other:?}; expected one of none, absolute, s1, s2"
            )),
        }
    }
}

/// Token-to-pixel coordinate mapping for an `h x w` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelCoords {
    pub h: usize,
    pub w: usize,
}

impl PixelCoords {
    pub fn new(h: usize, w: usize) -> Self {
        PixelCoords { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_col(&self, token: usize) -> (usize, usize) {
        (token / self.w, token % self.w)
    }

    /// L1 pixel distance between two tokens.
    pub fn l1(&self, i: usize, j: usize) -> usize {
        let (ri, ci) = self.row_col(i);
        let (rj, cj) = self.row_col(j);
        ri.abs_diff(rj) + ci.abs_diff(cj)
    }

    /// Per-token value of one axis, optionally shifted by a constant
    /// offset (used by the shift-invariance checks).
    pub fn axis_values(&self, axis: Axis, offset: f64) -> Vec<f64> {
        (0..self.len())
            .map(|t| {
                let (r, c) = self.row_col(t);
                let v = match axis {
                    Axis::Row => r,
                    Axis::Col => c,
                };
                v as f64 + offset
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

// ── Absolute sinusoidal encodings ───────────────────────────────────

/// Classic absolute encodings over both axes: `dim/2` channels per axis,
/// sin/cos pairs at geometrically spaced frequencies. Requires
/// `dim % 4 == 0` (sin/cos times two axes).
pub fn absolute_sinusoidal(coords: &PixelCoords, dim: usize) -> Result<Tensor<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(TensorError::Invalid {
            op: "absolute_sinusoidal",
            detail: format!("dim must be a positive multiple of 4, got {dim}"),
        });
    }
    let per_axis = dim / 2;
    let pairs = per_axis / 2;
    let l = coords.len();
    let mut data = vec![0.0; l * dim];
    for t in 0..l {
        let (r, c) = coords.row_col(t);
        for (half, v) in [(0, r as f64), (1, c as f64)] {
            let base = t * dim + half * per_axis;
            for p in 0..pairs {
                let freq = 10000f64.powf(-(p as f64) / pairs as f64);
                data[base + 2 * p] = (v * freq).sin();
                data[base + 2 * p + 1] = (v * freq).cos();
            }
        }
    }
    Tensor::new(vec![l, dim], data)
}

// ── Strategy 1 ──────────────────────────────────────────────────────

/// Per-axis strategy-1 parameters: one `(omega, alpha, beta)` triple per
/// lengthscale. Only `alpha`/`beta` are stored, so the implied query
/// projection is a rotation-scaling block by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct S1AxisParams {
    pub omegas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl S1AxisParams {
    pub fn identity(omegas: Vec<f64>) -> Self {
        let n = omegas.len();
        S1AxisParams {
            omegas,
            alphas: vec![1.0; n],
            betas: vec![0.0; n],
        }
    }

    /// Geometric lengthscale ladder mirroring conventional sinusoidal
    /// encodings: `10000^(-j/count)` for `j = 0..count`.
    pub fn geometric_omegas(count: usize) -> Vec<f64> {
        (0..count)
            .map(|j| 10000f64.powf(-(j as f64) / count as f64))
            .collect()
    }

    pub fn lengthscales(&self) -> usize {
        self.omegas.len()
    }
}

/// Strategy-1 features for a list of axis positions. Returns `(qp, kp)`
/// rows of width `2 * lengthscales` in `[sin block | cos block]` layout:
///
/// - `kp = [sin(w_j z) .. | cos(w_j z) ..]`
/// - `qp = [a_j sin - b_j cos .. | b_j sin + a_j cos ..]`
pub fn s1_axis_features(zs: &[f64], p: &S1AxisParams) -> (Vec<f64>, Vec<f64>) {
    let ml = p.lengthscales();
    let width = 2 * ml;
    let mut qp = vec![0.0; zs.len() * width];
    let mut kp = vec![0.0; zs.len() * width];
    for (t, &z) in zs.iter().enumerate() {
        for j in 0..ml {
            let (s, c) = (p.omegas[j] * z).sin_cos();
            let (a, b) = (p.alphas[j], p.betas[j]);
            kp[t * width + j] = s;
            kp[t * width + ml + j] = c;
            qp[t * width + j] = a * s - b * c;
            qp[t * width + ml + j] = b * s + a * c;
        }
    }
    (qp, kp)
}

/// Negative-control variant: an arbitrary 2x2 block `[[g00, g01], [g10,
/// g11]]` applied to each `[sin, cos]` pair (row-vector convention).
/// Setting `[[a, b], [-b, a]]` recovers [`s1_axis_features`].
pub fn s1_axis_features_generic(
    zs: &[f64],
    omegas: &[f64],
    blocks: &[[f64; 4]],
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(omegas.len(), blocks.len());
    let ml = omegas.len();
    let width = 2 * ml;
    let mut qp = vec![0.0; zs.len() * width];
    let mut kp = vec![0.0; zs.len() * width];
    for (t, &z) in zs.iter().enumerate() {
        for j in 0..ml {
            let (s, c) = (omegas[j] * z).sin_cos();
            let g = blocks[j];
            kp[t * width + j] = s;
            kp[t * width + ml + j] = c;
            qp[t * width + j] = g[0] * s + g[2] * c;
            qp[t * width + ml + j] = g[1] * s + g[3] * c;
        }
    }
    (qp, kp)
}

/// Full 2D strategy-1 features: per-axis features concatenated (row axis
/// first), width `2 * (ml_row + ml_col)`. Axis-wise invariance composes,
/// so the 2D inner product depends only on `(dr, dc)`.
pub fn s1_features_2d(
    coords: &PixelCoords,
    row: &S1AxisParams,
    col: &S1AxisParams,
    offset: (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let rz = coords.axis_values(Axis::Row, offset.0);
    let cz = coords.axis_values(Axis::Col, offset.1);
    let (qr, kr) = s1_axis_features(&rz, row);
    let (qc, kc) = s1_axis_features(&cz, col);
    let (wr, wc) = (2 * row.lengthscales(), 2 * col.lengthscales());
    let l = coords.len();
    let width = wr + wc;
    let mut qp = vec![0.0; l * width];
    let mut kp = vec![0.0; l * width];
    for t in 0..l {
        qp[t * width..t * width + wr].copy_from_slice(&qr[t * wr..(t + 1) * wr]);
        qp[t * width + wr..(t + 1) * width].copy_from_slice(&qc[t * wc..(t + 1) * wc]);
        kp[t * width..t * width + wr].copy_from_slice(&kr[t * wr..(t + 1) * wr]);
        kp[t * width + wr..(t + 1) * width].copy_from_slice(&kc[t * wc..(t + 1) * wc]);
    }
    (qp, kp)
}

/// Tape version of the per-axis features for learned `(omega, alpha,
/// beta)` vectors (each `[ml]`). Returns `(qp, kp)` of shape `[l, 2*ml]`.
pub fn s1_axis_features_tape<E: Element>(
    tape: &mut Tape<E>,
    zs: Var,
    omega: Var,
    alpha: Var,
    beta: Var,
) -> Result<(Var, Var)> {
    let l = tape.shape(zs)[0];
    let ml = tape.shape(omega)[0];
    let z2 = tape.reshape(zs, vec![l, 1])?;
    let w2 = tape.reshape(omega, vec![1, ml])?;
    let proj = tape.matmul(z2, w2)?;
    let kp = tape.sincos_concat(proj)?;
    let s = tape.narrow(kp, 1, 0, ml)?;
    let c = tape.narrow(kp, 1, ml, ml)?;
    let a_s = tape.mul_row(s, alpha)?;
    let b_c = tape.mul_row(c, beta)?;
    let q1 = tape.sub(a_s, b_c)?;
    let b_s = tape.mul_row(s, beta)?;
    let a_c = tape.mul_row(c, alpha)?;
    let q2 = tape.add(b_s, a_c)?;
    let qp = tape.concat(&[q1, q2], 1)?;
    Ok((qp, kp))
}

// ── Strategy 2 ──────────────────────────────────────────────────────

/// Clipped embedding index for a token pair: `min(l1(i, j), k)`. Distance
/// zero keeps its own embedding `w_0`.
pub fn s2_clip_index(coords: &PixelCoords, i: usize, j: usize, k: usize) -> usize {
    coords.l1(i, j).min(k)
}

/// Neighborhoods within L1 distance `k - 1` (including the token itself)
/// for the fast relative-position sum. Size per token is at most
/// `2k^2 - 2k + 1`.
pub fn build_neighbor_map(coords: &PixelCoords, k: usize) -> Arc<S2NeighborMap> {
    let l = coords.len();
    let mut per_token = Vec::with_capacity(l);
    let reach = k as i64 - 1;
    for i in 0..l {
        let (r, c) = coords.row_col(i);
        let mut list = Vec::new();
        for dr in -reach..=reach {
            let rr = r as i64 + dr;
            if rr < 0 || rr >= coords.h as i64 {
                continue;
            }
            let rem = reach - dr.abs();
            for dc in -rem..=rem {
                let cc = c as i64 + dc;
                if cc < 0 || cc >= coords.w as i64 {
                    continue;
                }
                let j = rr as usize * coords.w + cc as usize;
                let dist = (dr.abs() + dc.abs()) as u32;
                list.push((j as u32, dist));
            }
        }
        per_token.push(list);
    }
    Arc::new(S2NeighborMap { clip: k, per_token })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absolute_origin_is_zero_one() {
        let coords = PixelCoords::new(4, 4);
        let enc = absolute_sinusoidal(&coords, 16).unwrap();
        let row0 = &enc.data()[..16];
        for p in 0..8 {
            assert_eq!(row0[2 * p], 0.0, "sin at origin");
            assert_eq!(row0[2 * p + 1], 1.0, "cos at origin");
        }
    }

    #[test]
    fn absolute_same_row_shares_row_half() {
        let coords = PixelCoords::new(4, 4);
        let dim = 16;
        let enc = absolute_sinusoidal(&coords, dim).unwrap();
        // tokens 1 and 2 are both in row 0
        let a = &enc.data()[dim..dim + dim / 2];
        let b = &enc.data()[2 * dim..2 * dim + dim / 2];
        assert_eq!(a, b);
    }

    #[test]
    fn absolute_grid_vectors_distinct() {
        let coords = PixelCoords::new(4, 4);
        let dim = 16;
        let enc = absolute_sinusoidal(&coords, dim).unwrap();
        for i in 0..16 {
            for j in i + 1..16 {
                let a = &enc.data()[i * dim..(i + 1) * dim];
                let b = &enc.data()[j * dim..(j + 1) * dim];
                assert_ne!(a, b, "tokens {i} and {j} collide");
            }
        }
    }

    #[test]
    fn absolute_rejects_bad_dim() {
        let coords = PixelCoords::new(2, 2);
        assert!(absolute_sinusoidal(&coords, 6).is_err());
    }

    #[test]
    fn s1_identity_block_makes_qp_equal_kp() {
        let p = S1AxisParams::identity(vec![1.0, 0.5]);
        let (qp, kp) = s1_axis_features(&[0.3, -1.2, 4.0], &p);
        assert_eq!(qp, kp);
    }

    #[test]
    fn s1_closed_form_inner_product() {
        // single lengthscale, alpha=1 beta=0, w=1, z=0.3, z'=0.7 -> cos(0.4)
        let p = S1AxisParams::identity(vec![1.0]);
        let (qp, _) = s1_axis_features(&[0.3], &p);
        let (_, kp) = s1_axis_features(&[0.7], &p);
        let dot: f64 = qp.iter().zip(&kp).map(|(a, b)| a * b).sum();
        assert!((dot - 0.4f64.cos()).abs() < 1e-12);
        assert!((dot - 0.921_060_994_002_885).abs() < 1e-9);
    }

    #[test]
    fn s1_shift_invariance_sampled() {
        let p = S1AxisParams {
            omegas: vec![1.3, 0.2],
            alphas: vec![0.7, -1.1],
            betas: vec![0.4, 2.0],
        };
        let mut worst: f64 = 0.0;
        for t in 0..100 {
            let z = (t as f64) * 0.11 - 5.0;
            let zp = (t as f64) * 0.07 - 3.0;
            let tau = (t as f64) * 0.131 - 6.0;
            let (q0, _) = s1_axis_features(&[z], &p);
            let (_, k0) = s1_axis_features(&[zp], &p);
            let (q1, _) = s1_axis_features(&[z - tau], &p);
            let (_, k1) = s1_axis_features(&[zp - tau], &p);
            let d0: f64 = q0.iter().zip(&k0).map(|(a, b)| a * b).sum();
            let d1: f64 = q1.iter().zip(&k1).map(|(a, b)| a * b).sum();
            worst = worst.max((d0 - d1).abs());
        }
        assert!(worst <= 1e-12, "worst deviation {worst}");
    }

    #[test]
    fn s1_generic_block_breaks_invariance() {
        let omegas = [1.0];
        let blocks = [[1.0, 0.3, 0.8, 1.0]]; // not rotation-scaling
        let (q0, _) = s1_axis_features_generic(&[0.5], &omegas, &blocks);
        let (_, k0) = s1_axis_features_generic(&[1.5], &omegas, &blocks);
        let (q1, _) = s1_axis_features_generic(&[0.5 - 2.0], &omegas, &blocks);
        let (_, k1) = s1_axis_features_generic(&[1.5 - 2.0], &omegas, &blocks);
        let d0: f64 = q0.iter().zip(&k0).map(|(a, b)| a * b).sum();
        let d1: f64 = q1.iter().zip(&k1).map(|(a, b)| a * b).sum();
        assert!((d0 - d1).abs() > 1e-3);
    }

    #[test]
    fn s1_tape_matches_scalar_path() {
        let p = S1AxisParams {
            omegas: vec![0.9, 0.33],
            alphas: vec![1.4, -0.2],
            betas: vec![0.1, 0.8],
        };
        let zs = [0.0, 1.0, 2.0, 5.0];
        let (qp_ref, kp_ref) = s1_axis_features(&zs, &p);
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.constant(Tensor::new(vec![4], zs.to_vec()).unwrap());
        let w = tape.constant(Tensor::new(vec![2], p.omegas.clone()).unwrap());
        let a = tape.constant(Tensor::new(vec![2], p.alphas.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![2], p.betas.clone()).unwrap());
        let (qp, kp) = s1_axis_features_tape(&mut tape, z, w, a, b).unwrap();
        for (got, want) in tape.value(qp).data().iter().zip(&qp_ref) {
            assert!((got - want).abs() < 1e-14);
        }
        for (got, want) in tape.value(kp).data().iter().zip(&kp_ref) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn s2_clip_cases() {
        let coords = PixelCoords::new(8, 8);
        let i = 1 * 8 + 2; // (1, 2)
        let j = 4 * 8 + 0; // (4, 0)
        assert_eq!(coords.l1(i, j), 5);
        assert_eq!(s2_clip_index(&coords, i, j, 6), 5);
        assert_eq!(s2_clip_index(&coords, i, j, 3), 3);
        assert_eq!(s2_clip_index(&coords, i, i, 6), 0);
        // distance 7 clipped at 6
        let far = 0 * 8 + 0;
        let pt = 3 * 8 + 4;
        assert_eq!(coords.l1(far, pt), 7);
        assert_eq!(s2_clip_index(&coords, far, pt, 6), 6);
    }

    #[test]
    fn s2_lookup_symmetric() {
        let coords = PixelCoords::new(5, 7);
        for i in 0..coords.len() {
            for j in 0..coords.len() {
                assert_eq!(
                    s2_clip_index(&coords, i, j, 4),
                    s2_clip_index(&coords, j, i, 4)
                );
            }
        }
    }

    #[test]
    fn neighbor_map_matches_brute_force() {
        let coords = PixelCoords::new(6, 5);
        let k = 3;
        let map = build_neighbor_map(&coords, k);
        for i in 0..coords.len() {
            let mut want: Vec<(u32, u32)> = (0..coords.len())
                .filter(|&j| coords.l1(i, j) + 1 <= k)
                .map(|j| (j as u32, coords.l1(i, j) as u32))
                .collect();
            let mut got = map.per_token[i].clone();
            want.sort_unstable();
            got.sort_unstable();
            assert_eq!(got, want, "token {i}");
        }
    }

    #[test]
    fn neighbor_map_k1_is_diagonal() {
        let coords = PixelCoords::new(4, 4);
        let map = build_neighbor_map(&coords, 1);
        for (i, list) in map.per_token.iter().enumerate() {
            assert_eq!(list.as_slice(), &[(i as u32, 0)]);
        }
    }
}
