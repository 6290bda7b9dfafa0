use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

fn eval<F>(store: &ParamStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let l = loss_fn(&mut g)?;
    let v = g.value(l).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss is {v}")));
    }
    Ok(v)
}

/// Central finite-difference check of the gradient of `loss_fn` at `probes`
/// random coordinates. A parameter is drawn uniformly from `pids`, then a
/// coordinate uniformly within it.
pub fn grad_check<F>(store: &mut ParamStore<f64>, pids: &[usize], loss_fn: F, probes: usize, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    if pids.is_empty() || probes == 0 {
        return Err(Error::Config("gradient check needs parameters and probes".into()));
    }
    let grads = {
        let mut g = Graph::new(store);
        let l = loss_fn(&mut g)?;
        g.backward(l)?
    };
    let mut r = rng::rng(seed, &[0x4743_484B]);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let pid = pids[r.random_range(0..pids.len())];
        let index = r.random_range(0..store.tensor(pid).len());
        let analytic = grads.get(pid).map_or(0.0, |t| t.data[index]);
        let numeric = central_difference(store, &loss_fn, pid, index, eps)?;
        out.push(Probe { param: store.name(pid).to_string(), index, analytic, numeric, rel_err: rel_err(analytic, numeric) });
    }
    let max_rel_err = out.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, probes: out })
}

/// `(f(x + eps) - f(x - eps)) / 2 eps` along one coordinate.
pub fn central_difference<F>(store: &mut ParamStore<f64>, loss_fn: &F, pid: usize, index: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let x0 = store.tensor(pid).data[index];
    store.tensor_mut(pid).data[index] = x0 + eps;
    let plus = eval(store, loss_fn);
    store.tensor_mut(pid).data[index] = x0 - eps;
    let minus = eval(store, loss_fn);
    store.tensor_mut(pid).data[index] = x0;
    Ok((plus? - minus?) / (2.0 * eps))
}
