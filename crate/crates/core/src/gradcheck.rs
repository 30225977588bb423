//! Central finite-difference gradient checks in double precision.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Denominator floor so that vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Where the largest error occurred: input or parameter name, flat index.
    pub worst: (String, usize),
}

impl Report {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            worst: (String::new(), 0),
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = e;
            self.worst = (name.into(), index);
        }
    }
}

/// Evenly spaced flat indices, at most `limit` of them.
fn sample(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|i| i * len / limit + (len / limit) / 2).collect()
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Checks `d f / d inputs` where `f` builds a scalar from the input nodes.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], max_entries: usize, f: F) -> Result<Report>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; g.value(v).numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        scalar(&g, loss)
    };
    let mut report = Report::new();
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in sample(inputs[k].numel(), max_entries) {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            report.record(&alloc::format!("input{k}"), i, grad[i], (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every trainable parameter in `store`
/// (up to `per_param` entries each) for a session-built scalar `f`.
pub fn check_params<F>(store: &ParamStore<f64>, mode: Mode, per_param: usize, f: F) -> Result<Report>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    check_network(store, mode, &[], per_param, |s, _| f(s))
}

/// Like [`check_params`], additionally checking the gradient with respect to
/// each tensor in `inputs`, which `f` receives as graph nodes.
pub fn check_network<F>(store: &ParamStore<f64>, mode: Mode, inputs: &[Tensor<f64>], per_entry: usize, f: F) -> Result<Report>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let (analytic, input_grads) = {
        let mut s = Session::new(store, mode);
        let vars: Vec<Var> = inputs.iter().map(|t| s.g.variable(t.clone())).collect();
        let loss = f(&mut s, &vars)?;
        s.backward(loss)?;
        let input_grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| s.g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; s.g.value(v).numel()]))
            .collect();
        (s.gradients(), input_grads)
    };
    let eval = |st: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut s = Session::frozen(st, mode);
        let vars: Vec<Var> = xs.iter().map(|t| s.g.constant(t.clone())).collect();
        let loss = f(&mut s, &vars)?;
        scalar(&s.g, loss)
    };
    let mut report = Report::new();
    let mut xs = inputs.to_vec();
    for (k, grad) in input_grads.iter().enumerate() {
        for i in sample(inputs[k].numel(), per_entry) {
            let x = inputs[k].data()[i];
            xs[k].data_mut()[i] = x + STEP;
            let up = eval(store, &xs)?;
            xs[k].data_mut()[i] = x - STEP;
            let down = eval(store, &xs)?;
            xs[k].data_mut()[i] = x;
            report.record(&alloc::format!("input{k}"), i, grad[i], (up - down) / (2.0 * STEP));
        }
    }
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let grad = analytic.get(id);
        for i in sample(p.value.numel(), per_entry) {
            let a = grad.map_or(0.0, |g| g[i]);
            let x = p.value.data()[i];
            work.value_mut(id).data_mut()[i] = x + STEP;
            let up = eval(&work, inputs)?;
            work.value_mut(id).data_mut()[i] = x - STEP;
            let down = eval(&work, inputs)?;
            work.value_mut(id).data_mut()[i] = x;
            report.record(&p.name, i, a, (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// `sum(x * w)` for a fixed weight tensor: a scalar probe whose gradient with
/// respect to `x` is `w`, so every output element is exercised.
pub fn probe(g: &mut Graph<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}
