//! Central finite-difference verification of analytic gradients (64-bit).

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-4;

/// Gradients below this magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> Result<GradReport> {
    let mut rep = GradReport {
        checked: analytic.len(),
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        if e > rep.max_rel_err || e.is_nan() {
            rep.max_rel_err = e;
            rep.worst_index = i;
        }
    }
    if rep.max_rel_err > tol || rep.max_rel_err.is_nan() {
        let i = rep.worst_index;
        return Err(Error::GradCheck {
            index: i,
            analytic: analytic[i],
            numeric: numeric[i],
            rel_err: rep.max_rel_err,
            tolerance: tol,
        });
    }
    Ok(rep)
}

/// Checks d f(x) / d x, where `f` builds a scalar from the input leaf.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    grad_check_input(&ParamStore::new(), f, input, tol)
}

/// Like [`grad_check`], with (frozen) parameters available to `f`.
pub fn grad_check_input<F>(store: &ParamStore<f64>, f: F, input: &Tensor<f64>, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let x = g.input(t.clone())?;
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let mut g = Graph::with_params(store).frozen();
    let x = g.input_with_grad(input.clone())?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .of(x)
        .map(|t| t.into_data())
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    let mut numeric = Vec::with_capacity(input.numel());
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    compare(&analytic, &numeric, tol)
}

/// Checks gradients of a scalar with respect to every entry of every parameter.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let y = f(&mut g)?;
    let grads = g.backward(y)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let a = grads
            .param(id)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        analytic.extend(a);
        for i in 0..store.get(id).numel() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = {
                let mut g = Graph::with_params(&probe);
                let y = f(&mut g)?;
                g.value(y).item()
            };
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = {
                let mut g = Graph::with_params(&probe);
                let y = f(&mut g)?;
                g.value(y).item()
            };
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    compare(&analytic, &numeric, tol)
}

/// Like [`grad_check_params`], probing at most `per_param` seeded random
/// entries of each parameter with central differences of half-width `step`.
pub fn grad_check_params_sampled<F>(store: &ParamStore<f64>, f: F, tol: f64, per_param: usize, seed: u64, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    use rand::Rng;
    let mut rng = crate::rng::rng(seed);
    let mut g = Graph::with_params(store);
    let y = f(&mut g)?;
    let grads = g.backward(y)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(p);
        let y = f(&mut g)?;
        Ok(g.value(y).item())
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let a = grads.param(id).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..per_param.min(n) {
            let i = rng.random_range(0..n);
            analytic.push(a[i]);
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    compare(&analytic, &numeric, tol)
}
