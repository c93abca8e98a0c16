//! Numeric verification helpers shared by the test suites.
//!
//! Central differences and tolerance comparisons live here so every gradient
//! check in the crate uses the same oracle.

/// Central finite difference of a scalar function at `x`, step `h`.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Default step for f64 central differences.
pub const FD_STEP: f64 = 1e-6;

/// Relative-error comparison with an absolute floor for near-zero values:
/// passes when |a − b| ≤ abs_tol + rel_tol·max(|a|, |b|).
pub fn close(a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> bool {
    (a - b).abs() <= abs_tol + rel_tol * a.abs().max(b.abs())
}

/// Gradient-check comparison at the spec tolerance (rel 1e-5, floor 1e-8).
pub fn grad_close(analytic: f64, fd: f64) -> bool {
    close(analytic, fd, 1e-5, 1e-8)
}

/// Largest violation of [`grad_close`] over paired slices, as
/// (index, analytic, fd), or None when all pairs pass.
pub fn worst_grad_mismatch(analytic: &[f64], fd: &[f64]) -> Option<(usize, f64, f64)> {
    assert_eq!(analytic.len(), fd.len());
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (&a, &f)) in analytic.iter().zip(fd.iter()).enumerate() {
        if !grad_close(a, f) {
            let err = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            if worst.map_or(true, |(_, _, _, w)| err > w) {
                worst = Some((i, a, f, err));
            }
        }
    }
    worst.map(|(i, a, f, _)| (i, a, f))
}

/// Sample mean and (population) variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Median (of a copy; input untouched).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
