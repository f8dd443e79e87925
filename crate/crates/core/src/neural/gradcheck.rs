//! Finite-difference verification of analytic gradients.
//!
//! Central differences with a caller-chosen step are compared entry by
//! entry against the gradients a tape produced, using a symmetric
//! relative error that stays meaningful when either side is near zero.

use super::tensor::Tensor;

/// Largest relative disagreement between analytic gradients and central
/// finite differences of `loss` over every entry of every parameter.
///
/// `loss` must be a pure function of the parameter set. `analytic[i]`
/// holds the gradient for `params[i]` in the same element order.
pub fn max_rel_error<F>(mut loss: F, params: &[Tensor], analytic: &[Vec<f64>], h: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    assert!(h > 0.0, "step must be positive");
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        assert_eq!(
            params[pi].len(),
            analytic[pi].len(),
            "gradient size mismatch at parameter {pi}"
        );
        for (ci, &g) in analytic[pi].iter().enumerate() {
            let mut plus = params.to_vec();
            plus[pi].data[ci] += h;
            let mut minus = params.to_vec();
            minus[pi].data[ci] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (fd - g).abs() / (fd.abs() + g.abs() + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
