//! Trigonometric random feature map for the softmax kernel.
//!
//! For input dimension `d` and `m` Gaussian draws `w_j ~ N(0, I_d)`, the
//! map is
//!
//! `phi(x) = exp(||x||^2 / 2) / sqrt(m) * [sin(w_1.x), .., sin(w_m.x), cos(w_1.x), .., cos(w_m.x)]`
//!
//! so that `E[<phi(q), phi(k)>] = exp(q.k)`: an unbiased estimate of the
//! (unnormalized) softmax kernel, sharpened by larger `m`. The two mapped
//! functions are fixed to sin and cos, so the output dimension is `2m`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::chacha_stream;
use crate::tensor::{Element, ReduceKind, Result, Tape, Tensor, TensorError, Var};

/// Immutable random projection state. Draws are a pure function of
/// `(seed, draw_epoch)`; the matrix itself is never checkpointed, only the
/// pair that regenerates it.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `m x d`, row-major, standard Gaussian entries.
    omega: Vec<f64>,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
    pub draw_epoch: u64,
}

impl FeatureMap {
    /// Draw `m` Gaussian rows of dimension `d`. Identical `(seed,
    /// draw_epoch)` reproduce the matrix bitwise; successive epochs use
    /// independent streams.
    pub fn draw(seed: u64, draw_epoch: u64, m: usize, d: usize) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(TensorError::Invalid {
                op: "feature_map_draw",
                detail: format!("m and d must be positive, got m={m} d={d}"),
            });
        }
        let mut rng = chacha_stream(seed, draw_epoch);
        let omega: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
        Ok(FeatureMap {
            omega,
            m,
            d,
            seed,
            draw_epoch,
        })
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    /// Output dimension of the map: sin and cos per draw.
    pub fn feature_dim(&self) -> usize {
        2 * self.m
    }

    /// Apply the map to one vector. Errors when the scaling factor
    /// `exp(||x||^2 / 2)` overflows, advising rescaling.
    pub fn phi_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(TensorError::Invalid {
                op: "phi",
                detail: format!("input length {} but feature map has d={}", x.len(), self.d),
            });
        }
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let h = (sq / 2.0).exp();
        if !h.is_finite() {
            return Err(TensorError::ExpOverflow {
                dtype: "f64",
                magnitude: (sq / 2.0),
            });
        }
        let scale = h / (self.m as f64).sqrt();
        let mut out = vec![0.0; 2 * self.m];
        for j in 0..self.m {
            let row = &self.omega[j * self.d..(j + 1) * self.d];
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out[j] = scale * dot.sin();
            out[self.m + j] = scale * dot.cos();
        }
        Ok(out)
    }

    /// `<phi(q), phi(k)>`, an unbiased estimator of `exp(q.k)`. Computed in
    /// a division form so the zero-input case is exactly one.
    pub fn kernel_estimate(&self, q: &[f64], k: &[f64]) -> Result<f64> {
        if q.len() != self.d || k.len() != self.d {
            return Err(TensorError::Invalid {
                op: "kernel_estimate",
                detail: format!(
                    "input lengths {} / {} but feature map has d={}",
                    q.len(),
                    k.len(),
                    self.d
                ),
            });
        }
        let hq = half_norm_exp(q)?;
        let hk = half_norm_exp(k)?;
        let mut acc = 0.0;
        for j in 0..self.m {
            let row = &self.omega[j * self.d..(j + 1) * self.d];
            let dq: f64 = row.iter().zip(q).map(|(w, v)| w * v).sum();
            let dk: f64 = row.iter().zip(k).map(|(w, v)| w * v).sum();
            // sin(a)sin(b) + cos(a)cos(b) = cos(a - b)
            acc += (dq - dk).cos();
        }
        Ok(hq * hk * acc / self.m as f64)
    }
}

fn half_norm_exp(x: &[f64]) -> Result<f64> {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    let h = (sq / 2.0).exp();
    if !h.is_finite() {
        return Err(TensorError::ExpOverflow {
            dtype: "f64",
            magnitude: sq / 2.0,
        });
    }
    Ok(h)
}

/// Tape version of the map: rows of `x[.., l, d]` become feature rows
/// `[.., l, 2m]`, differentiable with respect to `x`.
pub fn phi_features<E: Element>(tape: &mut Tape<E>, x: Var, fm: &FeatureMap) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.last() != Some(&fm.d) {
        return Err(TensorError::Invalid {
            op: "phi_features",
            detail: format!(
                "input shape {shape:?} does not end in feature-map dimension d={}",
                fm.d
            ),
        });
    }
    // projection [.., l, d] x [d, m]
    let omega_t: Vec<f64> = {
        let mut t = vec![0.0; fm.d * fm.m];
        for j in 0..fm.m {
            for i in 0..fm.d {
                t[i * fm.m + j] = fm.omega[j * fm.d + i];
            }
        }
        t
    };
    let w = tape.constant(Tensor::from_f64_slice(vec![fm.d, fm.m], &omega_t)?);
    let proj = tape.matmul(x, w)?;
    let trig = tape.sincos_concat(proj)?;
    // scale rows by exp(||x||^2 / 2) / sqrt(m); the 1/sqrt(m) rides on the
    // narrow per-row factor rather than the wide feature tensor
    let sq = tape.mul(x, x)?;
    let row_sq = tape.reduce(ReduceKind::Sum, sq, Some(shape.len() - 1))?;
    let mut keep = shape[..shape.len() - 1].to_vec();
    keep.push(1);
    let row_sq = tape.reshape(row_sq, keep)?;
    let half = tape.scale(row_sq, 0.5)?;
    let h = tape.exp(half)?;
    let h = tape.scale(h, 1.0 / (fm.m as f64).sqrt())?;
    tape.scale_rows(trig, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draw_is_deterministic_and_epochs_differ() {
        let a = FeatureMap::draw(7, 0, 4, 2).unwrap();
        let b = FeatureMap::draw(7, 0, 4, 2).unwrap();
        let c = FeatureMap::draw(7, 1, 4, 2).unwrap();
        assert_eq!(a.omega(), b.omega());
        assert_ne!(a.omega(), c.omega());
        assert_eq!(a.omega().len(), 8);
    }

    #[test]
    fn draw_rejects_degenerate_sizes() {
        assert!(FeatureMap::draw(1, 0, 0, 2).is_err());
        assert!(FeatureMap::draw(1, 0, 2, 0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let fm = FeatureMap::draw(123, 0, 1000, 100).unwrap();
        let n = fm.omega().len() as f64;
        let mean: f64 = fm.omega().iter().sum::<f64>() / n;
        let var: f64 = fm.omega().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // standard errors: mean ~ 1/sqrt(n), variance ~ sqrt(2/n)
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn phi_zero_input() {
        let fm = FeatureMap::draw(3, 0, 4, 3).unwrap();
        let p = fm.phi_vec(&[0.0, 0.0, 0.0]).unwrap();
        let half = 1.0 / 2.0; // 1/sqrt(4)
        for j in 0..4 {
            assert_eq!(p[j], 0.0);
            assert!((p[4 + j] - half).abs() < 1e-15);
        }
        assert!((fm.kernel_estimate(&[0.0; 3], &[0.0; 3]).unwrap() - 1.0).abs() == 0.0);
    }

    #[test]
    fn phi_hand_value() {
        // d=1, m=1, omega=[2], x=[pi/4] -> exp(pi^2/32) * [sin(pi/2), cos(pi/2)]
        let mut fm = FeatureMap::draw(0, 0, 1, 1).unwrap();
        fm.omega = vec![2.0];
        let x = std::f64::consts::FRAC_PI_4;
        let p = fm.phi_vec(&[x]).unwrap();
        let h = (x * x / 2.0).exp();
        assert!((p[0] - h * 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12 * h);
    }

    #[test]
    fn phi_overflow_advises_rescaling() {
        let fm = FeatureMap::draw(3, 0, 2, 1).unwrap();
        let err = fm.phi_vec(&[50.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rescale queries/keys"), "{msg}");
    }

    #[test]
    fn tape_phi_matches_vector_phi() {
        let fm = FeatureMap::draw(11, 0, 8, 3).unwrap();
        let xs = [[0.3, -0.2, 0.9], [1.1, 0.0, -0.4]];
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![2, 3], xs.iter().flatten().copied().collect()).unwrap(),
        );
        let f = phi_features(&mut tape, x, &fm).unwrap();
        let got = tape.value(f).data();
        for (r, xr) in xs.iter().enumerate() {
            let want = fm.phi_vec(xr).unwrap();
            for (i, w) in want.iter().enumerate() {
                assert!((got[r * 16 + i] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_estimate_unbiased_at_modest_m() {
        // mean over redraws approaches exp(q.k); use a generous band here,
        // the tight 3-sigma version runs in the verification suite.
        let q = [0.4f64, -0.3];
        let k = [0.2f64, 0.6];
        let target = (q[0] * k[0] + q[1] * k[1]).exp();
        let mut sum = 0.0;
        let redraws = 200;
        for e in 0..redraws {
            let fm = FeatureMap::draw(99, e, 256, 2).unwrap();
            sum += fm.kernel_estimate(&q, &k).unwrap();
        }
        let mean = sum / redraws as f64;
        assert!((mean - target).abs() < 0.05, "mean {mean} target {target}");
    }
}
