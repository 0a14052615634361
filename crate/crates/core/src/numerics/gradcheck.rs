//! Central finite-difference checks of tape gradients.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let out = f(&mut g)?;
    let v = g.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every trainable parameter entry selected by `filter`.
pub fn grad_check_filtered<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        if !g.scalar_value(out).is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        g.backward(out).into_param_grads()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && filter(&p.name))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.value(id).len();
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store, &f);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store, &f);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// [`grad_check_filtered`] over all trainable parameters.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_filtered(store, f, eps, |_| true)
}

/// Checks the gradient of `f` with respect to its tensor inputs.
pub fn grad_check_inputs<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let b = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| b.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval_at = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };
    let mut xs = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for i in 0..xs.len() {
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + eps;
            let plus = eval_at(&xs)?;
            xs[i].data_mut()[k] = orig - eps;
            let minus = eval_at(&xs)?;
            xs[i].data_mut()[k] = orig;
            let err = relative_error(analytic[i].data()[k], (plus - minus) / (2.0 * eps));
            report.entries_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((format!("input{i}"), k));
            }
        }
    }
    Ok(report)
}
