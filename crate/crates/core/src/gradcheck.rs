//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Largest relative discrepancy found and where.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients of the scalar `f` against central
/// differences for every entry of `params`.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// Fails with [`Error::NearKink`] when a ReLU input or channel-max gap on
/// the unperturbed tape lies within `10 * eps` of a kink; callers resample.
pub fn grad_check<F>(f: F, store: &mut ParamStore, params: &[ParamId], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps:e} outside [1e-7, 1e-4]")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let limit = 10.0 * eps;
    if tape.kink_margin() < limit {
        return Err(Error::NearKink {
            margin: tape.kink_margin(),
            limit,
        });
    }
    let saved: Vec<_> = params.iter().map(|&id| store.grad(id).clone()).collect();
    for &id in params {
        store.grad_mut(id).fill(0.0);
    }
    tape.backward(loss, store)?;
    let analytic: Vec<_> = params.iter().map(|&id| store.grad(id).clone()).collect();
    for (&id, g) in params.iter().zip(saved) {
        *store.grad_mut(id) = g;
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (&id, grad) in params.iter().zip(&analytic) {
        for e in 0..store.value(id).len() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[e] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = e;
            }
        }
    }
    Ok(report)
}

/// Runs [`grad_check`] on all parameters of `store`.
pub fn grad_check_all<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    grad_check(f, store, &ids, eps)
}
