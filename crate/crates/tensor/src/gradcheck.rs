//! Central finite-difference gradient checking in 64-bit.
//!
//! Relative error of one entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, 1e-6)`; the floor keeps near-zero gradients from dominating.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Location of the worst entry, e.g. `param a.weight[3]` or `input 0[7]`.
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            checked: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", at());
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// `store` (at most `max_per_param` evenly spaced entries each).
///
/// The loss closure may use any error type that absorbs [`TensorError`].
pub fn check_params<F, E>(
    store: &mut ParamStore<f64>,
    loss: F,
    step: f64,
    max_per_param: usize,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut g = Graph::new(&*store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        for i in probe_indices(len, max_per_param) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.param(id).map_or(0.0, |g| g.data()[i]);
            report.record(a, numeric, || format!("param {}[{i}]", store.get(id).name));
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to input tensors.
pub fn check_inputs<F, E>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    loss: F,
    step: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    type Run = (f64, Vec<Option<Tensor<f64>>>);
    let run = |inputs: &[Tensor<f64>], track: bool| -> Result<Run, E> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), track)).collect();
        let l = loss(&mut g, &vars)?;
        let value = g.value(l).item();
        if !track {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(l)?;
        Ok((value, vars.iter().map(|&v| grads.wrt(v).cloned()).collect()))
    };
    let (_, analytic) = run(inputs, true)?;
    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for k in 0..work.len() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let (plus, _) = run(&work, false)?;
            work[k].data_mut()[i] = orig - step;
            let (minus, _) = run(&work, false)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            report.record(a, numeric, || format!("input {k}[{i}]"));
        }
    }
    Ok(report)
}
