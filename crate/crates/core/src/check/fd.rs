//! Finite-difference gradient oracles.
//!
//! Central differences with step 1e-5 in f64, compared against the tape's
//! analytic gradients. The oracle path rebuilds the forward computation
//! from scratch for every perturbed coordinate, so it shares nothing with
//! the backward implementation it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar-valued function at `x`.
pub fn finite_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Relative deviation with a small absolute floor, so near-zero gradients
/// do not inflate the ratio past the finite-difference noise floor.
pub fn relative_deviation(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

/// One differentiable computation under test: a set of input shapes and a
/// builder that maps tape leaves to a scalar root. The builder must be a
/// pure function of the leaf values.
pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Sampling half-range for the inputs.
    pub scale: f64,
    pub build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>,
}

/// Runs one case: analytic gradients from a single backward pass versus
/// central differences on every input coordinate. Returns the worst
/// relative deviation observed.
pub fn run_grad_case(case: &GradCase, rng: &mut ChaCha8Rng) -> f64 {
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| {
                    // keep away from relu's kink at zero
                    let v: f64 = rng.gen_range(-case.scale..case.scale);
                    if v.abs() < 0.01 {
                        v + 0.02
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();

    // analytic
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = case
        .shapes
        .iter()
        .zip(&inputs)
        .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap(), true))
        .collect();
    let root = (case.build)(&mut tape, &vars);
    tape.backward(root).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    // finite differences, one input tensor at a time
    let mut worst = 0.0f64;
    for (which, shape) in case.shapes.iter().enumerate() {
        let mut eval = |x: &[f64]| -> f64 {
            let mut t: Tape<f64> = Tape::new();
            let vs: Vec<Var> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let data = if i == which { x.to_vec() } else { inputs[i].clone() };
                    t.constant(Tensor::new(s.clone(), data).unwrap())
                })
                .collect();
            let r = (case.build)(&mut t, &vs);
            t.value(r).data()[0]
        };
        let fd = finite_difference(&mut eval, &inputs[which], FD_STEP);
        let an = &analytic[which];
        assert_eq!(
            an.len(),
            fd.len(),
            "{}: missing analytic gradient for input {which} of shape {shape:?}",
            case.name
        );
        for (a, f) in an.iter().zip(&fd) {
            worst = worst.max(relative_deviation(*a, *f));
        }
    }
    worst
}
