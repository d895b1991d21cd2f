//! Central finite differences against reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::ParameterStore;
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a parameter sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::dim(format!(
            "checked function must be scalar, got {:?}",
            t.shape()
        )));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::Numeric(format!("checked function evaluated to {y}")));
    }
    Ok(y)
}

/// Max over coordinates of `|a−n| / max(1,|a|,|n|)` for `f` at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(probe);
        let y = f(&mut g, v)?;
        scalar_of(&g, y)
    };
    let mut worst = 0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks the gradient of `f` with respect to every scalar of every
/// parameter in `store` (or only those whose name passes `select`).
pub fn check_parameters<F>(
    store: &ParameterStore<f64>,
    f: F,
    h: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let y = f(&mut g)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = g.param_grads(&grads);

    let eval = |probe: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(probe);
        let y = f(&mut g)?;
        scalar_of(&g, y)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = store.clone();
    for (name, value) in store.iter() {
        if !select(name) {
            continue;
        }
        for i in 0..value.len() {
            let mut plus = value.clone();
            plus.data_mut()[i] += h;
            probe.set_value(name, plus)?;
            let fp = eval(&probe)?;
            let mut minus = value.clone();
            minus.data_mut()[i] -= h;
            probe.set_value(name, minus)?;
            let fm = eval(&probe)?;
            probe.set_value(name, value.clone())?;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[name].data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst_parameter = name.to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
