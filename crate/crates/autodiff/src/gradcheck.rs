//! Central finite-difference gradient checking.
//!
//! The relative error for one element is `|analytic - numeric| /
//! max(|analytic|, |numeric|, floor)`; the floor keeps elements whose true
//! gradient is essentially zero from dominating the report.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many (evenly spaced) elements of each tensor.
    pub max_per_tensor: Option<usize>,
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-6,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Name of the tensor holding the worst element (`input[i]` or a parameter name).
    pub worst: String,
    pub checked: usize,
    pub passed: bool,
}

/// Checks `f` with respect to freshly created input leaves.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    grad_check_with_params(&store, inputs, f, &GradCheckConfig::with_tol(tol))
}

fn selected(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len && m > 0 => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

fn evaluate<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Checks `f` with respect to its inputs and every non-frozen parameter of `store`.
pub fn grad_check_with_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut param_grads: Vec<Option<Tensor>> = vec![None; store.len()];
    for (id, grad) in g.param_grads() {
        param_grads[id.index()] = Some(grad.clone());
    }
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        checked: 0,
        passed: true,
    };
    let mut record = |name: &str, analytic: f64, numeric: f64| {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(cfg.floor);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst = name.to_string();
        }
    };

    let h = cfg.step;
    let mut work_inputs = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in selected(inputs[i].len(), cfg.max_per_tensor) {
            let orig = work_inputs[i].data()[e];
            work_inputs[i].data_mut()[e] = orig + h;
            let plus = evaluate(store, &work_inputs, &f)?;
            work_inputs[i].data_mut()[e] = orig - h;
            let minus = evaluate(store, &work_inputs, &f)?;
            work_inputs[i].data_mut()[e] = orig;
            record(&format!("input[{i}]"), input_grads[i].data()[e], (plus - minus) / (2.0 * h));
        }
    }

    let mut work = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let name = store.get(id).name.clone();
        for e in selected(n, cfg.max_per_tensor) {
            let orig = store.get(id).value.data()[e];
            work.get_mut(id).value.data_mut()[e] = orig + h;
            let plus = evaluate(&work, inputs, &f)?;
            work.get_mut(id).value.data_mut()[e] = orig - h;
            let minus = evaluate(&work, inputs, &f)?;
            work.get_mut(id).value.data_mut()[e] = orig;
            let analytic = param_grads[id.index()].as_ref().map_or(0.0, |g| g.data()[e]);
            record(&name, analytic, (plus - minus) / (2.0 * h));
        }
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}
