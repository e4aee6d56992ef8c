//! Central finite-difference gradient verification.
//!
//! The checker re-evaluates a user-supplied forward closure at perturbed
//! inputs, so it is independent of the tape's backward pass by construction.

use crate::Arr;

/// Central-difference gradients of `f` w.r.t. each input, step `h`.
pub fn finite_diff<F>(mut f: F, inputs: &[Arr], h: f64) -> Vec<Arr>
where
    F: FnMut(&[Arr]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Arr::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let s = plus[i].as_slice_mut().unwrap();
                s[idx] += h;
            }
            {
                let s = minus[i].as_slice_mut().unwrap();
                s[idx] -= h;
            }
            let d = (f(&plus) - f(&minus)) / (2.0 * h);
            g.as_slice_mut().unwrap()[idx] = d;
        }
        grads.push(g);
    }
    grads
}

/// Worst-case relative error between two gradients:
/// `max_i |a_i - b_i| / max(1, |b_i|)`.
pub fn max_rel_err(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shape mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Assert that the analytic gradients of `build` match central differences.
///
/// `build` receives a fresh tape plus leaf ids for every input and must
/// return the scalar root. Called once for the analytic pass and 2·n times
/// for the numeric one.
pub fn check<F>(build: F, inputs: &[Arr], h: f64, tol: f64) -> f64
where
    F: Fn(&mut crate::Tape, &[crate::TensorId]) -> crate::TensorId,
{
    let mut tape = crate::Tape::new();
    let ids: Vec<crate::TensorId> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);

    let numeric = finite_diff(
        |xs: &[Arr]| {
            let mut t = crate::Tape::new();
            let ids: Vec<crate::TensorId> = xs.iter().map(|a| t.leaf(a.clone())).collect();
            let r = build(&mut t, &ids);
            t.scalar(r)
        },
        inputs,
        h,
    );

    let mut worst = 0.0f64;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, inputs[i].shape());
        let err = max_rel_err(&analytic, &numeric[i]);
        assert!(
            err < tol,
            "gradient mismatch on input {}: rel err {:.3e} >= {:.1e}",
            i,
            err,
            tol
        );
        worst = worst.max(err);
    }
    worst
}
