//! Small numeric helpers shared by the scheduler, metrics and calibration code.

/// Linear-interpolated empirical quantile (the "type 7" estimator).
///
/// Returns `None` for an empty sample. `q` is clamped to `[0, 1]`.
pub fn quantile(samples: &[f64], q: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(quantile_sorted(&sorted, q))
}

/// Same as [`quantile`] for an already ascending, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        None
    } else {
        Some(samples.iter().sum::<f64>() / samples.len() as f64)
    }
}

/// Mean absolute percentage error of `predicted` against `actual`, as a fraction.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Option<f64> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return None;
    }
    let total: f64 = actual.iter().zip(predicted).map(|(a, p)| ((p - a) / a).abs()).sum();
    Some(total / actual.len() as f64)
}

/// Piecewise-linear interpolation through `(x, y)` points sorted by `x`,
/// extrapolating linearly from the two outermost points beyond the hull.
pub(crate) fn interp_linear(points: &[(f64, f64)], x: f64) -> f64 {
    match points.len() {
        0 => f64::NAN,
        1 => points[0].1,
        n => {
            let idx = points.partition_point(|&(px, _)| px < x);
            let (a, b) = if idx == 0 {
                (points[0], points[1])
            } else if idx >= n {
                (points[n - 2], points[n - 1])
            } else {
                (points[idx - 1], points[idx])
            };
            if x == a.0 || a.0 == b.0 {
                return a.1;
            }
            if x == b.0 {
                return b.1;
            }
            a.1 + (x - a.0) * (b.1 - a.1) / (b.0 - a.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p90_of_ten_uniform_steps() {
        let window: Vec<f64> = (4..=13).map(|v| v as f64 * 1e-3).collect();
        let p90 = quantile(&window, 0.9).unwrap();
        assert!((p90 - 12.1e-3).abs() < 1e-12);
    }

    #[test]
    fn quantile_edges() {
        assert_eq!(quantile(&[], 0.5), None);
        assert_eq!(quantile(&[3.0], 0.9), Some(3.0));
        assert_eq!(quantile(&[1.0, 2.0], 0.0), Some(1.0));
        assert_eq!(quantile(&[1.0, 2.0], 1.0), Some(2.0));
    }

    #[test]
    fn interp_inside_and_beyond_hull() {
        let pts = [(4096.0, 1.6e12), (8192.0, 1.4e12)];
        assert_eq!(interp_linear(&pts, 6144.0), 1.5e12);
        assert!((interp_linear(&pts, 16384.0) - 1.0e12).abs() < 1.0);
        assert!((interp_linear(&pts, 0.0) - 1.8e12).abs() < 1.0);
        assert_eq!(interp_linear(&pts, 8192.0), 1.4e12);
    }

    #[test]
    fn mape_basic() {
        assert!((mape(&[1.0, 2.0], &[1.1, 1.8]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mape(&[], &[]), None);
    }
}
