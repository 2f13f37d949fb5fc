//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! push a node (the value) and, when any input requires gradients, a record
//! holding whatever the backward rule needs. [`Tape::backward`] walks the
//! records in reverse and accumulates gradients into every node that
//! requires them.
//!
//! Tapes are single-threaded by contract; independent tapes may run on
//! independent threads. Kernels may parallelize internally (see
//! `kernels.rs`) while staying bitwise deterministic.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{bmm_nn, bmm_nt, bmm_tn, map_new, zip_new};
use super::{batch_and_matrix, Element, Result, Tensor, TensorError};

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sin,
    Cos,
    Exp,
    Neg,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Sparse neighborhoods for the clipped relative-position attention: for
/// every token, the tokens within L1 distance `clip - 1` together with the
/// (unclipped) distance. The relation is symmetric with equal distances,
/// which the backward pass relies on.
#[derive(Debug, Clone)]
pub struct S2NeighborMap {
    pub clip: usize,
    pub per_token: Vec<Vec<(u32, u32)>>,
}

struct Node<E> {
    value: Tensor<E>,
    requires_grad: bool,
}

enum Record<E: Element> {
    Matmul {
        a: Var,
        b: Var,
        out: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
        out: Var,
    },
    SinCosConcat {
        x: Var,
        out: Var,
    },
    MatmulTn {
        a: Var,
        b: Var,
        out: Var,
    },
    SoftmaxRows {
        x: Var,
        out: Var,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
        out: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
        out: Var,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Sub {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Scale {
        x: Var,
        c: E,
        out: Var,
    },
    AddRow {
        a: Var,
        row: Var,
        out: Var,
    },
    MulRow {
        a: Var,
        row: Var,
        out: Var,
    },
    ScaleRows {
        a: Var,
        s: Var,
        out: Var,
    },
    DivRowsClamped {
        a: Var,
        den: Var,
        out: Var,
        eff: Vec<E>,
        clamped: Vec<bool>,
    },
    TransposeLast {
        x: Var,
        out: Var,
    },
    Reshape {
        x: Var,
        out: Var,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        out: Var,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
        out: Var,
    },
    RepeatBatch {
        x: Var,
        copies: usize,
        out: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        out: Var,
        probs: Vec<E>,
    },
    Dropout {
        x: Var,
        out: Var,
        mask: Vec<E>,
    },
    S2Neighborhood {
        p: Var,
        v: Var,
        out: Var,
        map: Arc<S2NeighborMap>,
    },
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    records: Vec<Record<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_ran: bool,
    clamp_events: u64,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
            backward_ran: false,
            clamp_events: 0,
        }
    }

    /// Insert a leaf tensor. Gradients accumulate into it on `backward`
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    /// Insert a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx].value.shape()
    }

    /// Gradient of a node after `backward`. Present only for nodes that
    /// require gradients and received a contribution.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Count of denominator rows clamped by `div_rows_clamped` so far.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Largest single buffer allocated on this tape, in elements.
    pub fn peak_node_numel(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).max().unwrap_or(0)
    }

    /// True if any node's trailing two dimensions are both `l`. Used as a
    /// structural audit that linear attention paths never materialize a
    /// sequence-by-sequence array.
    pub fn has_square_node(&self, l: usize) -> bool {
        self.nodes.iter().any(|n| {
            let s = n.value.shape();
            s.len() >= 2 && s[s.len() - 1] == l && s[s.len() - 2] == l
        })
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var { idx }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]`.
    /// Leading batch dimensions must match exactly, or one operand may be
    /// rank 2 and is then shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (abatch, m, ka) = batch_and_matrix(&ash).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let (bbatch, kb, n) = batch_and_matrix(&bsh).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let a_rank2 = ash.len() == 2;
        let b_rank2 = bsh.len() == 2;
        let batch_ok = abatch == bbatch && ash[..ash.len() - 2] == bsh[..bsh.len() - 2]
            || a_rank2
            || b_rank2;
        if ka != kb || !batch_ok {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let batch = abatch.max(bbatch);
        let mut out_shape = if a_rank2 && !b_rank2 {
            bsh[..bsh.len() - 2].to_vec()
        } else {
            ash[..ash.len() - 2].to_vec()
        };
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![E::zero(); batch * m * n];
        bmm_nn(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            ka,
            n,
            !a_rank2 || batch == 1,
            !b_rank2 || batch == 1,
            &mut data,
        );
        let rg = self.any_grad(&[a, b]);
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::Matmul { a, b, out });
        }
        Ok(out)
    }

    /// Elementwise `sin/cos/exp/neg/relu`. `exp` errors if any output is
    /// non-finite, naming the largest input magnitude.
    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = match kind {
            UnaryKind::Sin => map_new(xv.data(), |v| v.sin()),
            UnaryKind::Cos => map_new(xv.data(), |v| v.cos()),
            UnaryKind::Exp => map_new(xv.data(), |v| v.exp()),
            UnaryKind::Neg => map_new(xv.data(), |v| -v),
            UnaryKind::Relu => map_new(xv.data(), |v| if v > E::zero() { v } else { E::zero() }),
        };
        if kind == UnaryKind::Exp && data.iter().any(|v| !v.is_finite()) {
            let magnitude = xv
                .data()
                .iter()
                .map(|v| v.as_f64().abs())
                .fold(0.0, f64::max);
            return Err(TensorError::ExpOverflow {
                dtype: E::DTYPE.name(),
                magnitude,
            });
        }
        let shape = xv.shape().to_vec();
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(shape, data)?, rg);
        if rg {
            self.records.push(Record::Unary { kind, x, out });
        }
        Ok(out)
    }

    /// Fused `[sin(x) | cos(x)]` along the last axis: `[.., n] -> [.., 2n]`.
    /// One `sin_cos` evaluation per element, and the backward rule reads
    /// both trig values straight from the output, so no transcendental is
    /// ever recomputed.
    pub fn sincos_concat(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::Invalid {
            op: "sincos_concat",
            detail: "rank must be at least 1".into(),
        })?;
        let rows = xv.numel() / n;
        let mut data = vec![E::zero(); 2 * xv.numel()];
        {
            use rayon::prelude::*;
            let src_all = xv.data();
            let fill_rows = |first: usize, block: &mut [E]| {
                for (j, dst) in block.chunks_mut(2 * n).enumerate() {
                    let src = &src_all[(first + j) * n..(first + j + 1) * n];
                    for (i, &v) in src.iter().enumerate() {
                        let (s, c) = v.sin_cos();
                        dst[i] = s;
                        dst[n + i] = c;
                    }
                }
            };
            if xv.numel() >= 16_384 && rows > 1 {
                let tasks = (rayon::current_num_threads() * 4).clamp(1, rows);
                let rows_per_task = rows.div_ceil(tasks);
                data.par_chunks_mut(rows_per_task * 2 * n)
                    .enumerate()
                    .for_each(|(t, block)| fill_rows(t * rows_per_task, block));
            } else {
                fill_rows(0, &mut data);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 2 * n;
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::SinCosConcat { x, out });
        }
        Ok(out)
    }

    /// `a^T b` over the trailing axes without materializing the
    /// transpose: `[.., p, q]^T x [.., p, n] -> [.., q, n]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (abatch, pa, q) = batch_and_matrix(&ash).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let (bbatch, pb, n) = batch_and_matrix(&bsh).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        if pa != pb || abatch != bbatch || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: ash,
                rhs: bsh,
            });
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(q);
        out_shape.push(n);
        let mut data = vec![E::zero(); abatch * q * n];
        bmm_tn(
            self.value(a).data(),
            self.value(b).data(),
            abatch,
            pa,
            q,
            n,
            true,
            true,
            &mut data,
        );
        let rg = self.any_grad(&[a, b]);
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::MatmulTn { a, b, out });
        }
        Ok(out)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Cos, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    /// Row-stable softmax over the last axis: subtracts the row max before
    /// exponentiating, so rows sum to one for arbitrary finite inputs.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "softmax_rows",
                detail: "rank must be at least 1".into(),
            });
        }
        let q = shape[shape.len() - 1];
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(q) {
            let mx = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(shape, data)?, rg);
        if rg {
            self.records.push(Record::SoftmaxRows { x, out });
        }
        Ok(out)
    }

    /// Sum or mean over one axis, or over all elements (`axis: None`,
    /// producing a rank-0 scalar).
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (out_shape, data) = match axis {
            None => {
                let mut total = E::zero();
                for &v in xv.data() {
                    total += v;
                }
                if kind == ReduceKind::Mean {
                    total = total / E::from_f64(xv.numel() as f64);
                }
                (vec![], vec![total])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TensorError::Invalid {
                        op: "reduce",
                        detail: format!("axis {ax} out of range for shape {shape:?}"),
                    });
                }
                let (outer, mid, inner) = split_axis(&shape, ax);
                let mut out = vec![E::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..mid {
                        let base = (o * mid + j) * inner;
                        let dst = o * inner;
                        for i in 0..inner {
                            out[dst + i] += xv.data()[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = E::one() / E::from_f64(mid as f64);
                    for v in out.iter_mut() {
                        *v = *v * inv;
                    }
                }
                let mut os = shape.clone();
                os.remove(ax);
                (os, out)
            }
        };
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::Reduce { kind, x, axis, out });
        }
        Ok(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, None)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "no parts given".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total_mid = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_mid += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total_mid;
        let mut data = vec![E::zero(); outer * total_mid * inner];
        let mut offset = 0usize;
        for &p in parts {
            let mid = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total_mid + offset) * inner;
                let sb = o * mid * inner;
                data[dst..dst + mid * inner].copy_from_slice(&src[sb..sb + mid * inner]);
            }
            offset += mid;
        }
        let rg = self.any_grad(parts);
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::Concat {
                parts: parts.to_vec(),
                axis,
                out,
            });
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        if self.nodes[out.idx].requires_grad {
            self.records.push(Record::Add { a, b, out });
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        if self.nodes[out.idx].requires_grad {
            self.records.push(Record::Sub { a, b, out });
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        if self.nodes[out.idx].requires_grad {
            self.records.push(Record::Mul { a, b, out });
        }
        Ok(out)
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E + Sync,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = zip_new(av.data(), bv.data(), f);
        let shape = av.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = E::from_f64(c);
        let xv = self.value(x);
        let data = map_new(xv.data(), |v| v * c);
        let shape = xv.shape().to_vec();
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(shape, data)?, rg);
        if rg {
            self.records.push(Record::Scale { x, c, out });
        }
        Ok(out)
    }

    /// `a[.., n] + row[n]`, broadcasting the row over all leading dims.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.rowwise("add_row", a, row, |x, y| x + y)?;
        if self.nodes[out.idx].requires_grad {
            self.records.push(Record::AddRow { a, row, out });
        }
        Ok(out)
    }

    /// `a[.., n] * row[n]` elementwise per row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.rowwise("mul_row", a, row, |x, y| x * y)?;
        if self.nodes[out.idx].requires_grad {
            self.records.push(Record::MulRow { a, row, out });
        }
        Ok(out)
    }

    fn rowwise(
        &mut self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(E, E) -> E,
    ) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let ash = av.shape().to_vec();
        let n = *ash.last().unwrap_or(&0);
        if rv.shape() != [n] || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ash,
                rhs: rv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, &r) in chunk.iter_mut().zip(rv.data()) {
                *v = f(*v, r);
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(Tensor::new(ash, data)?, rg))
    }

    /// Scale each trailing-axis row of `a[.., n]` by the matching scalar in
    /// `s[.., 1]` (leading dims must agree).
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        let ash = av.shape().to_vec();
        let ssh = sv.shape().to_vec();
        let ok = ssh.len() == ash.len()
            && ssh.last() == Some(&1)
            && ssh[..ssh.len() - 1] == ash[..ash.len() - 1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: ash,
                rhs: ssh,
            });
        }
        let n = *ash.last().unwrap();
        let mut data = av.data().to_vec();
        for (r, chunk) in data.chunks_mut(n).enumerate() {
            let f = sv.data()[r];
            for v in chunk.iter_mut() {
                *v = *v * f;
            }
        }
        let rg = self.any_grad(&[a, s]);
        let out = self.push(Tensor::new(ash, data)?, rg);
        if rg {
            self.records.push(Record::ScaleRows { a, s, out });
        }
        Ok(out)
    }

    /// Row normalization `a[.., n] / den[.., 1]` with a sign-preserving
    /// magnitude clamp: rows where `|den| < eps` divide by `eps` (with
    /// `den`'s sign) instead, are counted in the tape's diagnostics, and
    /// propagate no gradient to the denominator.
    pub fn div_rows_clamped(&mut self, a: Var, den: Var, eps: f64) -> Result<Var> {
        let (av, dv) = (self.value(a), self.value(den));
        let ash = av.shape().to_vec();
        let dsh = dv.shape().to_vec();
        let ok = dsh.len() == ash.len()
            && dsh.last() == Some(&1)
            && dsh[..dsh.len() - 1] == ash[..ash.len() - 1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "div_rows_clamped",
                lhs: ash,
                rhs: dsh,
            });
        }
        let eps = E::from_f64(eps);
        let n = *ash.last().unwrap();
        let rows = av.numel() / n;
        let mut eff = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        let mut data = av.data().to_vec();
        for (r, chunk) in data.chunks_mut(n).enumerate() {
            let d = dv.data()[r];
            let c = d.abs() < eps;
            let e = if c {
                if d < E::zero() {
                    -eps
                } else {
                    eps
                }
            } else {
                d
            };
            for v in chunk.iter_mut() {
                *v = *v / e;
            }
            eff.push(e);
            clamped.push(c);
        }
        self.clamp_events += clamped.iter().filter(|&&c| c).count() as u64;
        let rg = self.any_grad(&[a, den]);
        let out = self.push(Tensor::new(ash, data)?, rg);
        if rg {
            self.records.push(Record::DivRowsClamped {
                a,
                den,
                out,
                eff,
                clamped,
            });
        }
        Ok(out)
    }

    /// Swap the trailing two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (batch, r, c) = batch_and_matrix(&shape).ok_or_else(|| TensorError::Invalid {
            op: "transpose_last",
            detail: format!("rank must be at least 2, got shape {shape:?}"),
        })?;
        let mut out_shape = shape.clone();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let mut data = vec![E::zero(); xv.numel()];
        transpose_batched(xv.data(), batch, r, c, &mut data);
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::TransposeLast { x, out });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let expected: usize = shape.iter().product();
        if expected != xv.numel() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: xv.numel(),
            });
        }
        let data = xv.data().to_vec();
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(shape, data)?, rg);
        if rg {
            self.records.push(Record::Reshape { x, out });
        }
        Ok(out)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "narrow",
                detail: format!(
                    "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                    start + len
                ),
            });
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xv.data()[src..src + len * inner]);
        }
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::Narrow {
                x,
                axis,
                start,
                out,
            });
        }
        Ok(out)
    }

    /// Select rows of a rank-2 table by index: `table[n, d], idx[k] -> [k, d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let shape = tv.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.idx].requires_grad;
        let out = self.push(Tensor::new(vec![indices.len(), d], data)?, rg);
        if rg {
            self.records.push(Record::GatherRows {
                table,
                indices: indices.to_vec(),
                out,
            });
        }
        Ok(out)
    }

    /// Tile `x` into a new leading batch axis of extent `copies`.
    pub fn repeat_batch(&mut self, x: Var, copies: usize) -> Result<Var> {
        if copies == 0 {
            return Err(TensorError::Invalid {
                op: "repeat_batch",
                detail: "copies must be positive".into(),
            });
        }
        let xv = self.value(x);
        let mut shape = vec![copies];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(copies * xv.numel());
        for _ in 0..copies {
            data.extend_from_slice(xv.data());
        }
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(shape, data)?, rg);
        if rg {
            self.records.push(Record::RepeatBatch { x, copies, out });
        }
        Ok(out)
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Invalid {
            op: "layer_norm",
            detail: "rank must be at least 1".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = E::from_f64(eps);
        let inv_d = E::one() / E::from_f64(d as f64);
        let rows = xv.numel() / d;
        let mut xhat = vec![E::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = vec![E::zero(); xv.numel()];
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mut mean = E::zero();
            for &v in src {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = E::zero();
            for &v in src {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv = E::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for i in 0..d {
                let h = (src[i] - mean) * inv;
                xhat[r * d + i] = h;
                data[r * d + i] = h * gv[i] + bv[i];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = self.push(Tensor::new(shape, data)?, rg);
        if rg {
            self.records.push(Record::LayerNorm {
                x,
                gamma,
                beta,
                out,
                xhat,
                inv_std,
            });
        }
        Ok(out)
    }

    /// Mean cross-entropy of `logits[b, c]` against integer targets,
    /// computed via a stable log-sum-exp. Returns a rank-0 scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!(
                    "logits {shape:?} incompatible with {} targets",
                    targets.len()
                ),
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!("target {bad} out of range for {c} classes"),
            });
        }
        let mut probs = vec![E::zero(); b * c];
        let mut loss = E::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (i, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + i] = e;
                sum += e;
            }
            for v in probs[r * c..(r + 1) * c].iter_mut() {
                *v = *v / sum;
            }
            loss += sum.ln() + mx - row[t];
        }
        loss = loss / E::from_f64(b as f64);
        let rg = self.nodes[logits.idx].requires_grad;
        let out = self.push(Tensor::scalar(loss), rg);
        if rg {
            self.records.push(Record::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                out,
                probs,
            });
        }
        Ok(out)
    }

    /// Inverted dropout: keeps each element with probability `1 - p`,
    /// scaling survivors by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                detail: format!("rate {p} outside [0, 1)"),
            });
        }
        let keep = 1.0 - p;
        let scale = E::from_f64(1.0 / keep);
        // one 32-bit draw per element; keep probability quantized to 2^-32
        let threshold = (keep * (u32::MAX as f64 + 1.0)).min(u32::MAX as f64) as u32;
        let xv = self.value(x);
        let mask: Vec<E> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<u32>() < threshold {
                    scale
                } else {
                    E::zero()
                }
            })
            .collect();
        let data = zip_new(xv.data(), &mask, |v, m| v * m);
        let shape = xv.shape().to_vec();
        let rg = self.nodes[x.idx].requires_grad;
        let out = self.push(Tensor::new(shape, data)?, rg);
        if rg {
            self.records.push(Record::Dropout { x, out, mask });
        }
        Ok(out)
    }

    /// Clipped-relative-position combine. Given per-token bucket scores
    /// `p[.., l, clip+1]` (last bucket = the shared far embedding) and
    /// values `v[.., l, d]`, computes rows
    ///
    /// `out_i = p[i, clip] * sum_j v_j + sum_{(j, dij) in map[i]} (p[i, dij] - p[i, clip]) * v_j`
    ///
    /// which equals the full relative-position sum at `O(l * clip^2)` cost.
    pub fn s2_neighborhood(&mut self, p: Var, v: Var, map: &Arc<S2NeighborMap>) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        let psh = pv.shape().to_vec();
        let vsh = vv.shape().to_vec();
        let l = map.per_token.len();
        let k1 = map.clip + 1;
        let ok = psh.len() >= 2
            && vsh.len() == psh.len()
            && psh[psh.len() - 2] == l
            && vsh[vsh.len() - 2] == l
            && psh[psh.len() - 1] == k1
            && psh[..psh.len() - 2] == vsh[..vsh.len() - 2];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "s2_neighborhood",
                lhs: psh,
                rhs: vsh,
            });
        }
        let d = vsh[vsh.len() - 1];
        let batch: usize = psh[..psh.len() - 2].iter().product();
        let mut data = vec![E::zero(); batch * l * d];
        for bi in 0..batch {
            let pb = &pv.data()[bi * l * k1..(bi + 1) * l * k1];
            let vb = &vv.data()[bi * l * d..(bi + 1) * l * d];
            let mut sum_v = vec![E::zero(); d];
            for row in vb.chunks(d) {
                for (s, &x) in sum_v.iter_mut().zip(row) {
                    *s += x;
                }
            }
            let ob = &mut data[bi * l * d..(bi + 1) * l * d];
            for i in 0..l {
                let base = pb[i * k1 + k1 - 1];
                let orow = &mut ob[i * d..(i + 1) * d];
                for (o, &s) in orow.iter_mut().zip(&sum_v) {
                    *o = base * s;
                }
                for &(j, dist) in &map.per_token[i] {
                    let w = pb[i * k1 + dist as usize] - base;
                    let vrow = &vb[j as usize * d..(j as usize + 1) * d];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        let mut out_shape = vsh.clone();
        let ol = out_shape.len();
        out_shape[ol - 1] = d;
        let rg = self.any_grad(&[p, v]);
        let out = self.push(Tensor::new(out_shape, data)?, rg);
        if rg {
            self.records.push(Record::S2Neighborhood {
                p,
                v,
                out,
                map: Arc::clone(map),
            });
        }
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Accumulates gradients into every
    /// node that requires them. A second call without a fresh tape is a
    /// contract error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_ran {
            return Err(TensorError::RepeatedBackward);
        }
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        self.backward_ran = true;
        self.ensure_grad(root);
        self.grads[root.idx].as_mut().unwrap()[0] = E::one();

        for ri in (0..self.records.len()).rev() {
            let out = record_out(&self.records[ri]);
            let Some(g) = self.grads[out.idx].take() else {
                continue;
            };
            self.apply_backward(ri, &g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.grads[v.idx].is_none() {
            let n = self.nodes[v.idx].value.numel();
            self.grads[v.idx] = Some(vec![E::zero(); n]);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn accumulate(&mut self, v: Var, contrib: &[E]) {
        if !self.wants(v) {
            return;
        }
        self.ensure_grad(v);
        let g = self.grads[v.idx].as_mut().unwrap();
        for (gv, &c) in g.iter_mut().zip(contrib) {
            *gv += c;
        }
    }

    fn apply_backward(&mut self, ri: usize, g: &[E]) {
        // Records are popped immutably; contributions are built into fresh
        // buffers and accumulated, keeping aliasing (e.g. mul(x, x)) sound.
        match &self.records[ri] {
            Record::Matmul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let ash = self.shape(a).to_vec();
                let bsh = self.shape(b).to_vec();
                let osh = self.shape(out).to_vec();
                let (_, m, k) = batch_and_matrix(&ash).unwrap();
                let (_, _, n) = batch_and_matrix(&bsh).unwrap();
                let (batch, _, _) = batch_and_matrix(&osh).unwrap();
                let a_batched = ash.len() > 2 || batch == 1;
                let b_batched = bsh.len() > 2 || batch == 1;
                if self.wants(a) {
                    let mut da = vec![E::zero(); self.value(a).numel()];
                    if a_batched {
                        bmm_nt(g, self.value(b).data(), batch, m, n, k, true, b_batched, &mut da);
                    } else {
                        // a is shared across the batch: accumulate every
                        // batch item into the single [m, k] gradient.
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let bsl = if b_batched {
                                &self.value(b).data()[bi * k * n..(bi + 1) * k * n]
                            } else {
                                self.value(b).data()
                            };
                            bmm_nt(gs, bsl, 1, m, n, k, true, true, &mut da);
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let mut db = vec![E::zero(); self.value(b).numel()];
                    if b_batched {
                        bmm_tn(self.value(a).data(), g, batch, m, k, n, a_batched, true, &mut db);
                    } else {
                        for bi in 0..batch {
                            let asl = if a_batched {
                                &self.value(a).data()[bi * m * k..(bi + 1) * m * k]
                            } else {
                                self.value(a).data()
                            };
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            bmm_tn(asl, gs, 1, m, k, n, true, true, &mut db);
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Record::Unary { kind, x, out } => {
                let (kind, x, out) = (*kind, *x, *out);
                let contrib: Vec<E> = match kind {
                    UnaryKind::Sin => zip_new(g, self.value(x).data(), |gv, xv| gv * xv.cos()),
                    UnaryKind::Cos => zip_new(g, self.value(x).data(), |gv, xv| -gv * xv.sin()),
                    UnaryKind::Exp => zip_new(g, self.value(out).data(), |gv, ov| gv * ov),
                    UnaryKind::Neg => map_new(g, |gv| -gv),
                    UnaryKind::Relu => zip_new(g, self.value(x).data(), |gv, xv| {
                        if xv > E::zero() {
                            gv
                        } else {
                            E::zero()
                        }
                    }),
                };
                self.accumulate(x, &contrib);
            }
            Record::SinCosConcat { x, out } => {
                let (x, out) = (*x, *out);
                let y = self.value(out).data();
                let n = *self.shape(x).last().unwrap();
                let rows = self.value(x).numel() / n;
                let mut contrib = vec![E::zero(); self.value(x).numel()];
                for r in 0..rows {
                    let ys = &y[r * 2 * n..(r + 1) * 2 * n];
                    let gs = &g[r * 2 * n..(r + 1) * 2 * n];
                    for i in 0..n {
                        // d sin = cos (stored at n+i), d cos = -sin (at i)
                        contrib[r * n + i] = gs[i] * ys[n + i] - gs[n + i] * ys[i];
                    }
                }
                self.accumulate(x, &contrib);
            }
            Record::MatmulTn { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let ash = self.shape(a).to_vec();
                let osh = self.shape(out).to_vec();
                let (batch, p, q) = batch_and_matrix(&ash).unwrap();
                let (_, _, n) = batch_and_matrix(&osh).unwrap();
                // c[q, n] = sum_p a[p, q] b[p, n]
                if self.wants(a) {
                    // da[p, q] = sum_n b[p, n] g[q, n]
                    let mut da = vec![E::zero(); self.value(a).numel()];
                    bmm_nt(self.value(b).data(), g, batch, p, n, q, true, true, &mut da);
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    // db[p, n] = sum_q a[p, q] g[q, n]
                    let mut db = vec![E::zero(); self.value(b).numel()];
                    bmm_nn(self.value(a).data(), g, batch, p, q, n, true, true, &mut db);
                    self.accumulate(b, &db);
                }
            }
            Record::SoftmaxRows { x, out } => {
                let (x, out) = (*x, *out);
                let y = self.value(out).data();
                let shape = self.shape(out);
                let q = *shape.last().unwrap();
                let mut contrib = vec![E::zero(); y.len()];
                for r in 0..y.len() / q {
                    let ys = &y[r * q..(r + 1) * q];
                    let gs = &g[r * q..(r + 1) * q];
                    let mut dot = E::zero();
                    for (&yv, &gv) in ys.iter().zip(gs) {
                        dot += yv * gv;
                    }
                    for i in 0..q {
                        contrib[r * q + i] = ys[i] * (gs[i] - dot);
                    }
                }
                self.accumulate(x, &contrib);
            }
            Record::Reduce { kind, x, axis, out } => {
                let (kind, x, axis, _out) = (*kind, *x, *axis, *out);
                let xsh = self.shape(x).to_vec();
                let mut contrib = vec![E::zero(); self.value(x).numel()];
                match axis {
                    None => {
                        let f = match kind {
                            ReduceKind::Sum => E::one(),
                            ReduceKind::Mean => E::one() / E::from_f64(contrib.len() as f64),
                        };
                        let gv = g[0] * f;
                        for v in contrib.iter_mut() {
                            *v = gv;
                        }
                    }
                    Some(ax) => {
                        let (outer, mid, inner) = split_axis(&xsh, ax);
                        let f = match kind {
                            ReduceKind::Sum => E::one(),
                            ReduceKind::Mean => E::one() / E::from_f64(mid as f64),
                        };
                        for o in 0..outer {
                            for j in 0..mid {
                                let dst = (o * mid + j) * inner;
                                let src = o * inner;
                                for i in 0..inner {
                                    contrib[dst + i] = g[src + i] * f;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &contrib);
            }
            Record::Concat { parts, axis, out } => {
                let parts = parts.clone();
                let (axis, out) = (*axis, *out);
                let osh = self.shape(out).to_vec();
                let (outer, total_mid, inner) = split_axis(&osh, axis);
                let mut offset = 0usize;
                for p in parts {
                    let mid = self.shape(p)[axis];
                    let mut contrib = vec![E::zero(); self.value(p).numel()];
                    for o in 0..outer {
                        let src = (o * total_mid + offset) * inner;
                        let dst = o * mid * inner;
                        contrib[dst..dst + mid * inner]
                            .copy_from_slice(&g[src..src + mid * inner]);
                    }
                    self.accumulate(p, &contrib);
                    offset += mid;
                }
            }
            Record::Add { a, b, .. } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Record::Sub { a, b, .. } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let neg: Vec<E> = map_new(g, |v| -v);
                self.accumulate(b, &neg);
            }
            Record::Mul { a, b, .. } => {
                let (a, b) = (*a, *b);
                let da = zip_new(g, self.value(b).data(), |gv, bv| gv * bv);
                let db = zip_new(g, self.value(a).data(), |gv, av| gv * av);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Record::Scale { x, c, .. } => {
                let (x, c) = (*x, *c);
                let contrib = map_new(g, |v| v * c);
                self.accumulate(x, &contrib);
            }
            Record::AddRow { a, row, .. } => {
                let (a, row) = (*a, *row);
                self.accumulate(a, g);
                if self.wants(row) {
                    let n = self.value(row).numel();
                    let mut dr = vec![E::zero(); n];
                    for chunk in g.chunks(n) {
                        for (d, &c) in dr.iter_mut().zip(chunk) {
                            *d += c;
                        }
                    }
                    self.accumulate(row, &dr);
                }
            }
            Record::MulRow { a, row, .. } => {
                let (a, row) = (*a, *row);
                let n = self.value(row).numel();
                if self.wants(a) {
                    let rv = self.value(row).data().to_vec();
                    let mut da = vec![E::zero(); g.len()];
                    for (chunk, dchunk) in g.chunks(n).zip(da.chunks_mut(n)) {
                        for ((d, &c), &r) in dchunk.iter_mut().zip(chunk).zip(&rv) {
                            *d = c * r;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(row) {
                    let av = self.value(a).data();
                    let mut dr = vec![E::zero(); n];
                    for (chunk, achunk) in g.chunks(n).zip(av.chunks(n)) {
                        for ((d, &c), &x) in dr.iter_mut().zip(chunk).zip(achunk) {
                            *d += c * x;
                        }
                    }
                    self.accumulate(row, &dr);
                }
            }
            Record::ScaleRows { a, s, .. } => {
                let (a, s) = (*a, *s);
                let n = *self.shape(a).last().unwrap();
                if self.wants(a) {
                    let sv = self.value(s).data().to_vec();
                    let mut da = vec![E::zero(); g.len()];
                    for (r, (chunk, dchunk)) in g.chunks(n).zip(da.chunks_mut(n)).enumerate() {
                        let f = sv[r];
                        for (d, &c) in dchunk.iter_mut().zip(chunk) {
                            *d = c * f;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(s) {
                    let av = self.value(a).data();
                    let rows = g.len() / n;
                    let mut ds = vec![E::zero(); rows];
                    for r in 0..rows {
                        let mut acc = E::zero();
                        for i in 0..n {
                            acc += g[r * n + i] * av[r * n + i];
                        }
                        ds[r] = acc;
                    }
                    self.accumulate(s, &ds);
                }
            }
            Record::DivRowsClamped {
                a,
                den,
                out,
                eff,
                clamped,
            } => {
                let (a, den, out) = (*a, *den, *out);
                let eff = eff.clone();
                let clamped = clamped.clone();
                let n = *self.shape(a).last().unwrap();
                if self.wants(a) {
                    let mut da = vec![E::zero(); g.len()];
                    for (r, (chunk, dchunk)) in g.chunks(n).zip(da.chunks_mut(n)).enumerate() {
                        let inv = E::one() / eff[r];
                        for (d, &c) in dchunk.iter_mut().zip(chunk) {
                            *d = c * inv;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(den) {
                    let ov = self.value(out).data();
                    let rows = g.len() / n;
                    let mut dd = vec![E::zero(); rows];
                    for r in 0..rows {
                        if clamped[r] {
                            continue;
                        }
                        let mut acc = E::zero();
                        for i in 0..n {
                            acc += g[r * n + i] * ov[r * n + i];
                        }
                        dd[r] = -acc / eff[r];
                    }
                    self.accumulate(den, &dd);
                }
            }
            Record::TransposeLast { x, out } => {
                let (x, out) = (*x, *out);
                let osh = self.shape(out).to_vec();
                let (batch, r, c) = batch_and_matrix(&osh).unwrap();
                let mut contrib = vec![E::zero(); g.len()];
                transpose_batched(g, batch, r, c, &mut contrib);
                self.accumulate(x, &contrib);
            }
            Record::Reshape { x, .. } => {
                let x = *x;
                self.accumulate(x, g);
            }
            Record::Narrow {
                x, axis, start, ..
            } => {
                let (x, axis, start) = (*x, *axis, *start);
                let xsh = self.shape(x).to_vec();
                let (outer, mid, inner) = split_axis(&xsh, axis);
                let len = g.len() / (outer * inner);
                let mut contrib = vec![E::zero(); self.value(x).numel()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    contrib[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(x, &contrib);
            }
            Record::GatherRows { table, indices, .. } => {
                let table = *table;
                let indices = indices.clone();
                let d = self.shape(table)[1];
                let mut contrib = vec![E::zero(); self.value(table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        contrib[i * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(table, &contrib);
            }
            Record::RepeatBatch { x, copies, .. } => {
                let (x, copies) = (*x, *copies);
                let n = self.value(x).numel();
                let mut contrib = vec![E::zero(); n];
                for b in 0..copies {
                    for (d, &c) in contrib.iter_mut().zip(&g[b * n..(b + 1) * n]) {
                        *d += c;
                    }
                }
                self.accumulate(x, &contrib);
            }
            Record::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let d = self.value(gamma).numel();
                let rows = g.len() / d;
                if self.wants(beta) {
                    let mut db = vec![E::zero(); d];
                    for chunk in g.chunks(d) {
                        for (dv, &c) in db.iter_mut().zip(chunk) {
                            *dv += c;
                        }
                    }
                    self.accumulate(beta, &db);
                }
                if self.wants(gamma) {
                    let mut dg = vec![E::zero(); d];
                    for (chunk, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((dv, &c), &h) in dg.iter_mut().zip(chunk).zip(hrow) {
                            *dv += c * h;
                        }
                    }
                    self.accumulate(gamma, &dg);
                }
                if self.wants(x) {
                    let gv = self.value(gamma).data().to_vec();
                    let inv_d = E::one() / E::from_f64(d as f64);
                    let mut dx = vec![E::zero(); g.len()];
                    for r in 0..rows {
                        let gs = &g[r * d..(r + 1) * d];
                        let hs = &xhat[r * d..(r + 1) * d];
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        let mut dxhat = vec![E::zero(); d];
                        for i in 0..d {
                            let dh = gs[i] * gv[i];
                            dxhat[i] = dh;
                            m1 += dh;
                            m2 += dh * hs[i];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        let inv = inv_std[r];
                        for i in 0..d {
                            dx[r * d + i] = (dxhat[i] - m1 - hs[i] * m2) * inv;
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Record::CrossEntropy {
                logits,
                targets,
                probs,
                ..
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                let b = targets.len();
                let c = probs.len() / b;
                let gscale = g[0] / E::from_f64(b as f64);
                let mut contrib = vec![E::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    for i in 0..c {
                        let ind = if i == t { E::one() } else { E::zero() };
                        contrib[r * c + i] = (probs[r * c + i] - ind) * gscale;
                    }
                }
                self.accumulate(logits, &contrib);
            }
            Record::Dropout { x, mask, .. } => {
                let x = *x;
                let contrib = zip_new(g, mask, |gv, m| gv * m);
                self.accumulate(x, &contrib);
            }
            Record::S2Neighborhood { p, v, map, .. } => {
                let (p, v) = (*p, *v);
                let map = Arc::clone(map);
                let l = map.per_token.len();
                let k1 = map.clip + 1;
                let vsh = self.shape(v).to_vec();
                let d = vsh[vsh.len() - 1];
                let batch: usize = vsh[..vsh.len() - 2].iter().product();
                let pv = self.value(p).data();
                let vv = self.value(v).data();
                let mut dp = vec![E::zero(); pv.len()];
                let mut dv = vec![E::zero(); vv.len()];
                for bi in 0..batch {
                    let pb = &pv[bi * l * k1..(bi + 1) * l * k1];
                    let vb = &vv[bi * l * d..(bi + 1) * l * d];
                    let gb = &g[bi * l * d..(bi + 1) * l * d];
                    let dpb = &mut dp[bi * l * k1..(bi + 1) * l * k1];
                    let mut sum_v = vec![E::zero(); d];
                    for row in vb.chunks(d) {
                        for (s, &x) in sum_v.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    // gbase[j] receives sum_i base_i * g_i (the global term).
                    let mut gbase = vec![E::zero(); d];
                    for i in 0..l {
                        let grow = &gb[i * d..(i + 1) * d];
                        let base = pb[i * k1 + k1 - 1];
                        for (s, &c) in gbase.iter_mut().zip(grow) {
                            *s += base * c;
                        }
                        // d/d p[i, clip]: the global sum minus every
                        // neighbor's subtracted copy.
                        let mut acc = E::zero();
                        for (&gv_, &sv) in grow.iter().zip(&sum_v) {
                            acc += gv_ * sv;
                        }
                        for &(j, dist) in &map.per_token[i] {
                            let vrow = &vb[j as usize * d..(j as usize + 1) * d];
                            let mut dot = E::zero();
                            for (&gv_, &xv) in grow.iter().zip(vrow) {
                                dot += gv_ * xv;
                            }
                            dpb[i * k1 + dist as usize] += dot;
                            acc -= dot;
                        }
                        dpb[i * k1 + k1 - 1] += acc;
                    }
                    let dvb = &mut dv[bi * l * d..(bi + 1) * l * d];
                    for j in 0..l {
                        let drow = &mut dvb[j * d..(j + 1) * d];
                        for (dr, &s) in drow.iter_mut().zip(&gbase) {
                            *dr += s;
                        }
                        // Symmetric relation: i in map[j] iff j in map[i],
                        // with the same distance.
                        for &(i, dist) in &map.per_token[j] {
                            let i = i as usize;
                            let w = pb[i * k1 + dist as usize] - pb[i * k1 + k1 - 1];
                            let grow = &gb[i * d..(i + 1) * d];
                            for (dr, &c) in drow.iter_mut().zip(grow) {
                                *dr += w * c;
                            }
                        }
                    }
                }
                self.accumulate(p, &dp);
                self.accumulate(v, &dv);
            }
        }
    }
}

fn record_out<E: Element>(r: &Record<E>) -> Var {
    match r {
        Record::Matmul { out, .. }
        | Record::SinCosConcat { out, .. }
        | Record::MatmulTn { out, .. }
        | Record::Unary { out, .. }
        | Record::SoftmaxRows { out, .. }
        | Record::Reduce { out, .. }
        | Record::Concat { out, .. }
        | Record::Add { out, .. }
        | Record::Sub { out, .. }
        | Record::Mul { out, .. }
        | Record::Scale { out, .. }
        | Record::AddRow { out, .. }
        | Record::MulRow { out, .. }
        | Record::ScaleRows { out, .. }
        | Record::DivRowsClamped { out, .. }
        | Record::TransposeLast { out, .. }
        | Record::Reshape { out, .. }
        | Record::Narrow { out, .. }
        | Record::GatherRows { out, .. }
        | Record::RepeatBatch { out, .. }
        | Record::LayerNorm { out, .. }
        | Record::CrossEntropy { out, .. }
        | Record::Dropout { out, .. }
        | Record::S2Neighborhood { out, .. } => *out,
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn transpose_batched<E: Element>(src: &[E], batch: usize, r: usize, c: usize, dst: &mut [E]) {
    for bi in 0..batch {
        let s = &src[bi * r * c..(bi + 1) * r * c];
        let d = &mut dst[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let i = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.constant(Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap());
        let c = t.matmul(i, m).unwrap();
        assert_eq!(t.value(c).data(), t.value(m).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = tape();
        let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut t = tape();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = tape();
        let x = t.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1000.0, 1000.0]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_value() {
        let mut t = tape();
        let x = t.constant(
            Tensor::new(vec![1, 2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap(),
        );
        let y = t.softmax_rows(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn unary_trivial_values() {
        let mut t = tape();
        let x = t.constant(Tensor::new(vec![2], vec![0.0, std::f64::consts::FRAC_PI_2]).unwrap());
        let y = t.sin(x).unwrap();
        assert!((t.value(y).data()[0]).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 1.0).abs() < 1e-15);
        let z = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let e = t.exp(z).unwrap();
        assert_eq!(t.value(e).data(), &[1.0]);
    }

    #[test]
    fn exp_overflow_errors_with_magnitude() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.constant(Tensor::new(vec![1], vec![200.0f32]).unwrap());
        let err = t.exp(x).unwrap_err();
        match err {
            TensorError::ExpOverflow { dtype, magnitude } => {
                assert_eq!(dtype, "f32");
                assert!((magnitude - 200.0).abs() < 1e-6);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn reduce_and_concat_trivial() {
        let mut t = tape();
        let x = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum_all(x).unwrap();
        assert_eq!(t.value(s).data(), &[6.0]);
        let a = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1], vec![3.0]).unwrap());
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = tape();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarRoot { .. }));
    }

    #[test]
    fn repeated_backward_is_an_error() {
        let mut t = tape();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(TensorError::RepeatedBackward)));
    }

    #[test]
    fn mean_square_gradient_matches_hand_value() {
        // d(mean(x^2))/dx at [1, 2] = [1, 2]
        let mut t = tape();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let m = t.reduce(ReduceKind::Mean, sq, None).unwrap();
        t.backward(m).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn div_rows_clamped_counts_events() {
        let mut t = tape();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let d = t.constant(Tensor::new(vec![2, 1], vec![2.0, 1e-9]).unwrap());
        let o = t.div_rows_clamped(a, d, 1e-6).unwrap();
        assert_eq!(t.clamp_events(), 1);
        assert!((t.value(o).data()[0] - 0.5).abs() < 1e-15);
        assert!((t.value(o).data()[2] - 3e6).abs() < 1.0);
    }

    #[test]
    fn square_node_audit() {
        let mut t = tape();
        let a = t.constant(Tensor::zeros(vec![4, 8, 8]));
        assert!(t.has_square_node(8));
        assert!(!t.has_square_node(4));
        let _ = a;
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut t = tape();
            let a = t.leaf(
                Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64) * 0.37 - 1.1).collect())
                    .unwrap(),
                true,
            );
            let b = t.constant(Tensor::new(
                vec![3, 3],
                (0..9).map(|i| ((i * 7) % 5) as f64 * 0.21).collect(),
            ).unwrap());
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(c).unwrap();
            let l = t.sum_all(s).unwrap();
            t.backward(l).unwrap();
            (
                t.value(s).data().to_vec(),
                t.grad(a).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
