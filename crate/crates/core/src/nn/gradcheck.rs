//! Central-difference gradient checking against an arbitrary scalar loss of
//! the parameter vector. Used by the validation suites; slow by design.

/// Central differences with step `h` over `f` at coordinates `xs`.
/// Returns one numeric derivative per coordinate.
pub fn central_differences<F>(mut f: F, xs: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(xs.len());
    let mut work = xs.to_vec();
    for i in 0..xs.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Relative error used by every finite-difference assertion:
/// |a - b| / max(floor, |b|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}
