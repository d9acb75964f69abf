//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates the loss function, never the analytic
//! gradients, so it stays independent of the backward implementation.

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare `analytic[coords]` against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The error at a coordinate is `|a - fd| / max(|a|, |fd|)`, falling back to
/// an absolute comparison against `floor` when both are that small (a zero
/// gradient has no meaningful relative error).
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut work = x.to_vec();
    let mut max_rel_err = 0.0_f64;
    for &i in coords {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs());
        let err = if denom > floor { (a - fd).abs() / denom } else { (a - fd).abs() / floor };
        max_rel_err = max_rel_err.max(err);
    }
    GradCheckReport { checked: coords.len(), max_rel_err }
}

/// Evenly spread `count` coordinate indices over `0..len`.
pub fn spread_coords(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return vec![];
    }
    let count = count.min(len).max(1);
    (0..count).map(|k| k * len / count).collect()
}
