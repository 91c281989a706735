//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only the forward function is evaluated here, so the oracle shares no code
//! with the backward pass it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Step used for all gradient checks.
pub const FD_EPS: f64 = 1e-5;

/// Central differences `(f(x + ε·e_i) − f(x − ε·e_i)) / 2ε` for each listed
/// flat coordinate `i` of `x`, or for every coordinate when `coords` is `None`.
pub fn numeric_gradient(
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<f64> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest absolute discrepancy relative to the gradient's own scale:
/// `max_i |a_i − b_i| / max(max_i |a_i|, max_i |b_i|)`.
///
/// Scaling by the largest component keeps entries whose true derivative is
/// near zero from dominating through finite-difference round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Outcome of [`kink_aware_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// [`max_relative_error`] against the per-coordinate references.
    pub error: f64,
    /// Coordinates whose one-sided differences disagreed at `ε`.
    pub kinked: usize,
    pub checked: usize,
}

/// Finite-difference check that tolerates relu and max-pool kinks.
///
/// A kink inside `[x − ε, x + ε]` makes the central difference a blend of
/// two slopes, off by half the gap between the forward and backward
/// differences. Coordinates where that gap exceeds `tol` (relative to the
/// gradient scale) are stepped again at `ε / 100`; if the gap persists the
/// kink is closer than that and the analytic value must match the nearer
/// one-sided difference, which is the slope on the kink-free side.
/// Elsewhere the central difference is the reference.
pub fn kink_aware_check(
    x: &Tensor,
    eps: f64,
    tol: f64,
    coords: &[usize],
    analytic: &[f64],
    mut f: impl FnMut(&Tensor) -> f64,
) -> GradCheck {
    assert_eq!(coords.len(), analytic.len());
    let f0 = f(x);
    let mut probe = x.clone();
    let mut stencil = |i: usize, h: f64| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        ((up - down) / (2.0 * h), (up - f0) / h, (f0 - down) / h)
    };
    let coarse: Vec<_> = coords.iter().map(|&i| stencil(i, eps)).collect();
    let scale = analytic
        .iter()
        .chain(coarse.iter().map(|s| &s.0))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let smooth = |fwd: f64, bwd: f64| (fwd - bwd).abs() <= tol * scale;
    let mut kinked = 0;
    let reference: Vec<f64> = coords
        .iter()
        .zip(&coarse)
        .zip(analytic)
        .map(|((&i, &(central, fwd, bwd)), &a)| {
            if smooth(fwd, bwd) {
                return central;
            }
            kinked += 1;
            let (central, fwd, bwd) = stencil(i, eps / 100.0);
            if smooth(fwd, bwd) {
                central
            } else if (fwd - a).abs() <= (bwd - a).abs() {
                fwd
            } else {
                bwd
            }
        })
        .collect();
    GradCheck {
        error: max_relative_error(analytic, &reference),
        kinked,
        checked: coords.len(),
    }
}

/// Checks every input's analytic gradient of `Σ out ⊙ R` (fixed random `R`)
/// against central differences; returns the worst relative error.
pub fn grad_error(seed: u64, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let n: usize = out_shape.iter().product();
    let proj = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("output shape is valid");
    let forward = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let r = tape.constant(proj.clone());
    let prod = tape.mul(out, r).expect("same shape");
    let loss = tape.sum(prod);
    tape.backward(loss).expect("scalar loss");

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = numeric_gradient(&inputs[k], FD_EPS, None, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            forward(&xs)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}
