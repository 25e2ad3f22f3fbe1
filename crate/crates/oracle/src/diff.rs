//! Finite-difference gradient checking.

/// Relative error with an absolute floor, so near-zero gradients are judged
/// on absolute rather than relative terms.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference check of analytic gradients against an f64 scalar
/// function of several flat input tensors.
///
/// `f` is evaluated with one coordinate of one input perturbed by ±`h`;
/// the resulting quotient is compared with `analytic[t][i]`. Inputs whose
/// `analytic` entry is `None` are skipped (non-differentiated leaves).
/// Returns the maximum relative error observed.
pub fn check_grads(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    analytic: &[Option<&[f32]>],
    h: f64,
    floor: f64,
) -> f64 {
    assert_eq!(inputs.len(), analytic.len(), "one analytic slot per input tensor");
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        assert_eq!(
            grad.len(),
            inputs[t].len(),
            "analytic gradient {t} length mismatch"
        );
        for i in 0..inputs[t].len() {
            let orig = work[t][i];
            work[t][i] = orig + h;
            let up = f(&work);
            work[t][i] = orig - h;
            let down = f(&work);
            work[t][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(fd, grad[i] as f64, floor);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Convenience: f32 slice to f64 vec.
pub fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}
