//! Central finite-difference gradient checking.
//!
//! The checker perturbs individual parameter scalars through the [`Params`]
//! visitation interface, evaluates a caller-supplied scalar loss twice per
//! scalar, and compares `(f(x+e) - f(x-e)) / 2e` against the analytic
//! gradient left in the model's gradient buffers by a caller-supplied
//! backward pass.
//!
//! The reported relative error for one scalar is
//! `|fd - g| / max(|fd|, |g|, 1e-3)`; the floor keeps round-off noise in the
//! difference quotient from dominating when the true gradient is tiny, while
//! still catching any real sign, transpose, or scaling bug. The perturbation
//! is `1e-4 * max(1, |x|)` per scalar, evaluated in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{export_grads, zero_grads, Params};

/// Which parameter scalars to check.
#[derive(Debug, Clone, Copy)]
pub enum Selection {
    /// Every scalar of every tensor (only for small models).
    All,
    /// A seeded random sample of at most `per_tensor` scalars per tensor.
    PerTensor { per_tensor: usize, seed: u64 },
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalars checked.
    pub checked: usize,
    /// Largest relative error observed.
    pub max_rel_err: f64,
    /// Name and flat offset of the worst scalar, for diagnostics.
    pub worst: String,
}

fn scalar_dims<M: Params + ?Sized>(model: &mut M) -> Vec<(String, usize)> {
    let mut dims = Vec::new();
    model.visit_params("", &mut |p| dims.push((p.name.clone(), p.value.len())));
    dims
}

fn with_scalar<M: Params + ?Sized>(
    model: &mut M,
    tensor_idx: usize,
    offset: usize,
    f: &mut dyn FnMut(&mut f64),
) {
    let mut idx = 0usize;
    model.visit_params("", &mut |p| {
        if idx == tensor_idx {
            f(&mut p.value[offset]);
        }
        idx += 1;
    });
}

/// Run a central finite-difference check of `backward` against `loss`.
///
/// `loss` must evaluate the scalar objective without touching gradients;
/// `backward` must zero nothing itself — this function zeroes the gradient
/// buffers, calls `backward` once to populate them, then sweeps the selected
/// scalars.
pub fn check_gradients<M: Params>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> f64,
    mut backward: impl FnMut(&mut M),
    selection: Selection,
) -> GradCheckReport {
    zero_grads(model);
    backward(model);
    let analytic = export_grads(model);
    let dims = scalar_dims(model);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };

    let mut rng = match selection {
        Selection::All => None,
        Selection::PerTensor { seed, .. } => Some(ChaCha20Rng::seed_from_u64(seed)),
    };

    for (t_idx, (name, len)) in dims.iter().enumerate() {
        let offsets: Vec<usize> = match selection {
            Selection::All => (0..*len).collect(),
            Selection::PerTensor { per_tensor, .. } => {
                let rng = rng.as_mut().expect("rng present for sampling");
                if *len <= per_tensor {
                    (0..*len).collect()
                } else {
                    sample(rng, *len, per_tensor).into_vec()
                }
            }
        };
        for off in offsets {
            let mut orig = 0.0;
            with_scalar(model, t_idx, off, &mut |x| orig = *x);
            let eps = 1e-4 * orig.abs().max(1.0);

            with_scalar(model, t_idx, off, &mut |x| *x = orig + eps);
            let up = loss(model);
            with_scalar(model, t_idx, off, &mut |x| *x = orig - eps);
            let down = loss(model);
            with_scalar(model, t_idx, off, &mut |x| *x = orig);

            let fd = (up - down) / (2.0 * eps);
            let g = analytic[t_idx].1[off];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{off}] fd={fd:.6e} analytic={g:.6e}");
            }
        }
    }
    report
}

/// Central finite differences of a scalar function over a flat vector.
///
/// Used for input-gradient (Jacobian) checks where the perturbed quantity is
/// an activation rather than a parameter.
pub fn finite_diff_vec(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work[i];
        let eps = 1e-4 * orig.abs().max(1.0);
        work[i] = orig + eps;
        let up = f(&work);
        work[i] = orig - eps;
        let down = f(&work);
        work[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}
