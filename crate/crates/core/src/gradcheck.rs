//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Upper bound on checked coordinates per parameter; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    /// Test hook: multiplies every analytic gradient by this factor.
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords_per_param: None,
            corrupt_analytic: None,
        }
    }
}

/// The coordinate with the largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len && k > 0 => {
            let stride = len as f64 / k as f64;
            (0..k).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares the analytic gradient of `f` against central differences on
/// every parameter in `store`, returning the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F>(store: &mut ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let first = evaluate(store, &f)?;
    let second = evaluate(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let ids: Vec<ParamId> = store.ids().collect();
        let grads = g.backward(out)?;
        ids.into_iter()
            .map(|id| {
                let n = store.tensor(id).len();
                let mut v = grads.param(id).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
                if let Some(k) = opts.corrupt_analytic {
                    v.iter_mut().for_each(|x| *x *= k);
                }
                (id, v)
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, grad) in analytic {
        for c in coords(grad.len(), opts.max_coords_per_param) {
            let orig = store.tensor(id).data()[c];
            store.tensor_mut(id).data_mut()[c] = orig + opts.step;
            let plus = evaluate(store, &f);
            store.tensor_mut(id).data_mut()[c] = orig - opts.step;
            let minus = evaluate(store, &f);
            store.tensor_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = grad[c];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = Some(WorstCoordinate {
                    param: store.get(id).name.clone(),
                    index: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
