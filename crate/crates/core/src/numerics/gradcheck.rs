//! Central finite differences and the error measure shared by every
//! gradient suite.

/// Central-difference gradient `(f(x+h e_i) - f(x-h e_i)) / 2h`, in f64.
///
/// `h` is expected in `[1e-5, 1e-2]`; values outside are clamped into it.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let h = h.clamp(1e-5, 1e-2);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central difference restricted to the listed coordinates.
pub fn finite_diff_coords(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let h = h.clamp(1e-5, 1e-2);
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute error when both norms are
/// below `1e-10` (a genuinely zero gradient).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "rel_error length");
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
