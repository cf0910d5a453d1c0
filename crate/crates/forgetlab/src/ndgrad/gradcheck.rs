//! Central finite-difference oracle for gradient verification.
//!
//! Deliberately knows nothing about the tape: it only re-evaluates a closure
//! with perturbed inputs, so it stays independent of the backward pass it is
//! used to check.

/// d loss / d inputs[which] by central differences, re-running `f` per entry.
pub fn numeric_grad<F>(f: &mut F, inputs: &[Vec<f64>], which: usize, eps: f64) -> Vec<f64>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let n = inputs[which].len();
    let mut grad = Vec::with_capacity(n);
    for e in 0..n {
        let orig = work[which][e];
        work[which][e] = orig + eps;
        let plus = f(&work);
        work[which][e] = orig - eps;
        let minus = f(&work);
        work[which][e] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}

/// max over entries of |a - n| / max(|a|, |n|, floor).
///
/// The floor turns the comparison absolute for near-zero gradients, where a
/// pure relative error would amplify finite-difference rounding noise.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
