//! Central finite-difference verification of tape gradients.

use super::store::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly strided entries per tensor.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_entries: None,
        }
    }
}

/// Relative errors below this denominator are measured absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` for entries above tolerance.
    pub flagged: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn evaluate<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient check objective"));
    }
    Ok(v)
}

/// Compares backward-pass gradients of the scalar built by `f` with
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every selected entry of `params`.
///
/// `f` must be deterministic. The store is restored before returning.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    params: &[ParamId],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let mut reports = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.tensor(id).len();
        let analytic: Vec<f64> = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut report = ParamReport {
            name: store.name(id).to_string(),
            checked: 0,
            max_rel_error: 0.0,
            flagged: Vec::new(),
        };
        for i in (0..n).step_by(stride) {
            let orig = store.values(id)[i];
            store.values_mut(id)[i] = orig + opts.eps;
            let plus = evaluate(store, &f);
            store.values_mut(id)[i] = orig - opts.eps;
            let minus = evaluate(store, &f);
            store.values_mut(id)[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err > opts.tol {
                report.flagged.push((i, analytic[i], numeric));
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        params: reports,
        tol: opts.tol,
    })
}
