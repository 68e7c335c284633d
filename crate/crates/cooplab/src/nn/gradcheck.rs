//! Central finite differences for verifying analytic gradients.
//!
//! The checker only ever calls the forward closure, so it stays
//! independent of the backward implementation it is used to verify.

/// Central-difference gradient of a scalar function of a flat vector.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Elementwise relative error, with a floor of 1 on the denominator so
/// near-zero gradients compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
