//! Finite-difference oracles shared by unit tests.

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut z = x.to_vec();
    (0..x.len())
        .map(|i| {
            z[i] = x[i] + h;
            let up = f(&z);
            z[i] = x[i] - h;
            let down = f(&z);
            z[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / ‖b‖₂`, or the absolute norm when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}
