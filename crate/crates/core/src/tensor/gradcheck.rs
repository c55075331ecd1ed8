//! Central finite-difference gradient verification.
//!
//! The checker is deliberately independent of the tape: it only evaluates a
//! scalar-valued closure at perturbed inputs, so it can falsify any backward
//! implementation in the crate.

use super::Scalar;

/// Central finite-difference gradient of `f` at `x` with the given step.
pub fn central_difference(
    f: &mut dyn FnMut(&[Scalar]) -> Scalar,
    x: &[Scalar],
    step: Scalar,
) -> Vec<Scalar> {
    let mut buf = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let fp = f(&buf);
        buf[i] = orig - step;
        let fm = f(&buf);
        buf[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Compare an analytic gradient against central differences.
///
/// Passes when `|analytic - fd| <= rel_tol * max(|analytic|, |fd|) + abs_tol`
/// for every coordinate; returns a description of the first violation
/// otherwise.
pub fn check_gradient(
    f: &mut dyn FnMut(&[Scalar]) -> Scalar,
    x: &[Scalar],
    analytic: &[Scalar],
    step: Scalar,
    rel_tol: Scalar,
    abs_tol: Scalar,
) -> std::result::Result<(), String> {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let fd = central_difference(f, x, step);
    for i in 0..x.len() {
        let diff = (analytic[i] - fd[i]).abs();
        let scale = analytic[i].abs().max(fd[i].abs());
        if diff > rel_tol * scale + abs_tol {
            return Err(format!(
                "gradient mismatch at index {i}: analytic {:.9e}, finite-diff {:.9e} \
                 (diff {:.3e}, allowed {:.3e})",
                analytic[i],
                fd[i],
                diff,
                rel_tol * scale + abs_tol
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let analytic = [2.0, -4.0, 1.0];
        check_gradient(&mut f, &x, &analytic, 1e-5, 1e-6, 1e-10).unwrap();
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut f = |x: &[f64]| x[0] * x[0];
        assert!(check_gradient(&mut f, &[3.0], &[5.99], 1e-5, 1e-4, 1e-10).is_err());
    }
}
