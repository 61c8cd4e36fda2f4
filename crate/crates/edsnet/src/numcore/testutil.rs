//! Shared test-only helpers for finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::Tensor;

/// Central-difference oracle: rebuilds the graph per perturbed input.
/// Relative error is the norm-ratio form, robust at f32 precision.
pub(crate) fn grad_check<F>(build: F, inputs: &[Tensor], tol: f32)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    grad_check_with_floor(build, inputs, tol, 0.0)
}

/// As `grad_check`, but a parameter group also passes when the absolute
/// difference norm sits below `floor`. FD noise is absolute (about
/// ULP(loss)/2h per element), so groups whose true gradient norm is near
/// that floor always fail a purely relative gate.
pub(crate) fn grad_check_with_floor<F>(build: F, inputs: &[Tensor], tol: f32, floor: f64)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).len(), 1, "grad_check loss must be scalar");
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed
            .iter()
            .map(|x| t.leaf(x.clone(), true))
            .collect();
        let l = build(&mut t, &vs);
        t.value(l).data()[0] as f64
    };

    let h = 1e-3f32;
    for (ti, input) in inputs.iter().enumerate() {
        let mut fd = vec![0.0f64; input.len()];
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[e] -= h;
            fd[e] = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
        }
        let a = &analytic[ti];
        assert_eq!(a.len(), input.len(), "missing gradient for input {ti}");
        let mut diff = 0.0f64;
        let mut na = 0.0f64;
        let mut nf = 0.0f64;
        for e in 0..input.len() {
            diff += (a[e] as f64 - fd[e]).powi(2);
            na += (a[e] as f64).powi(2);
            nf += fd[e].powi(2);
        }
        let rel = diff.sqrt() / (na.sqrt() + nf.sqrt() + 1e-12);
        assert!(
            rel < tol as f64 || diff.sqrt() <= floor,
            "input {ti}: relative error {rel}, difference norm {}",
            diff.sqrt()
        );
    }
}

/// Weighted sum against fixed pseudorandom coefficients, so every output
/// element receives a distinct gradient.
pub(crate) fn weighted_sum(tape: &mut Tape, y: Var) -> Var {
    let n = tape.value(y).len();
    let w: Vec<f32> = (0..n).map(|i| ((i * 37 + 11) % 19) as f32 / 19.0 - 0.4).collect();
    let shape = tape.value(y).shape().to_vec();
    let wt = tape.constant(Tensor::from_raw(shape, w));
    let p = tape.mul_elem(y, wt);
    tape.sum_all(p)
}
