//! Central finite-difference verification of analytic gradients.

use super::{Gradients, ParamId, ParamStore, Rng};
use crate::error::{arg_err, Error, Result};

/// Coordinates sampled per parameter tensor at most.
pub const MAX_COORDS_PER_PARAM: usize = 512;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares analytic gradients against `(L(p + h) - L(p - h)) / 2h`.
///
/// `loss_fn` returns the loss value and its analytic gradients at the given
/// store; it must be deterministic. The error per coordinate is
/// `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    store: &ParamStore,
    h: f64,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(h > 0.0) {
        return arg_err(format!("finite difference step must be positive, got {h}"));
    }
    let (base, grads) = loss_fn(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base}")));
    }
    let mut work = store.clone();
    let mut rng = Rng::new(seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let analytic = grads.dense(store, id);
        let n = analytic.numel();
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_PARAM {
            (0..n).collect()
        } else {
            (0..MAX_COORDS_PER_PARAM).map(|_| rng.below(n)).collect()
        };
        for k in coords {
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + h;
            let (plus, _) = loss_fn(&work)?;
            work.value_mut(id).data_mut()[k] = orig - h;
            let (minus, _) = loss_fn(&work)?;
            work.value_mut(id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss not finite while perturbing {}[{k}]",
                    store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
