//! Central finite differences, used as the independent oracle for every
//! hand-written backward pass.

/// Central-difference gradient of `f` at `x`, perturbing one coordinate at a
/// time by `±step`.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are
/// (near) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_cubic_up_to_step_squared() {
        let g = central_differences(|x| x[0].powi(3) + 2.0 * x[1], &[1.0, 5.0], 1e-3);
        assert!((g[0] - (3.0 + 1e-6)).abs() < 1e-9);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_scale_free() {
        assert!(relative_error(&[1e-9, 0.0], &[1e-9, 0.0]) == 0.0);
        assert!((relative_error(&[2.0, 0.0], &[1.0, 0.0]) - 0.5).abs() < 1e-15);
    }
}
