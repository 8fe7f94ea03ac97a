//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of the tape's backward rules it is used to check.

use super::{Gradients, ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen, as `(parameter name, flat index, error)`.
    pub worst: Option<(String, usize, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.2)
    }
}

/// Relative error with an absolute floor so that two near-zero values agree.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares `analytic` against central differences of `loss_fn` with step `h`
/// for every scalar of the selected parameters (all, if `only` is `None`).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    analytic: &Gradients,
    h: f64,
    only: Option<&[ParamId]>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport {
        worst: None,
        checked: 0,
    };
    for id in ids {
        let n = store.get(id).value.len();
        for i in 0..n {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + h;
            let plus = loss_fn(store)?;
            store.get_mut(id).value.data_mut()[i] = original - h;
            let minus = loss_fn(store)?;
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| err > w.2) {
                report.worst = Some((store.get(id).name.clone(), i, err));
            }
        }
    }
    Ok(report)
}
