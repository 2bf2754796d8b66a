use super::Tensor;

/// Denominator floor for [`relative_error`]; below it the comparison
/// degrades gracefully to an absolute one.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::from_shape(x.shape().clone(), grad).expect("same shape as input")
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest elementwise relative error between two gradient vectors.
///
/// Central differences carry rounding noise proportional to the magnitude of
/// the differentiated scalar, which shows up on near-zero entries of large
/// gradient vectors. The denominator floor therefore scales with the vector:
/// `REL_ERR_FLOOR * max(1, max_k |numeric_k|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let scale = numeric.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let floor = REL_ERR_FLOOR * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 7.0]).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn vector_floor_follows_largest_entry() {
        // Error on the tiny entry is measured against 1e-3 * 100.
        let err = max_relative_error(&[100.0, 1e-9], &[100.0, 0.0]);
        assert!((err - 1e-9 / 0.1).abs() < 1e-20);
    }

    #[test]
    fn relative_error_floors_small_values() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / REL_ERR_FLOOR);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
