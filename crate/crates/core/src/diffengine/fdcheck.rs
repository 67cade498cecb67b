//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use super::EngineError;

/// Worst per-component agreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Component with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

impl FdReport {
    fn empty() -> Self {
        Self { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, components: 0 }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        if rel > self.max_rel_error || self.components == 0 || rel.is_nan() {
            self.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel.max(self.max_rel_error) };
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.components += 1;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// component `i` of `x`.
pub fn finite_difference_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> FdReport {
    assert_eq!(x.len(), analytic.len(), "gradient length must match the point");
    let mut report = FdReport::empty();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        report.record(i, analytic[i], (fp - fm) / (2.0 * h));
    }
    report
}

/// Checks the gradient of a scalar graph with respect to every trainable
/// parameter in `store`. `build` must construct the loss from scratch each
/// call. At most `max_entries` evenly spaced components of each parameter are
/// probed (all of them when `None`).
pub fn graph_gradient_check(
    store: &ParameterStore,
    build: impl Fn(&mut Graph, &ParameterStore) -> Result<Var, EngineError>,
    h: f64,
    max_entries: Option<usize>,
) -> Result<Vec<(String, FdReport)>, EngineError> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?.parameters(store);
    let eval = |s: &ParameterStore| -> Result<f64, EngineError> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut out = Vec::new();
    let mut probe = store.clone();
    for (name, analytic) in &grads {
        let n = analytic.len();
        let indices: Vec<usize> = match max_entries {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let base = store.value(name)?.clone();
        let mut report = FdReport::empty();
        for &i in &indices {
            let mut t = base.clone();
            t.data_mut()[i] = base.data()[i] + h;
            probe.set_value(name, t.clone())?;
            let fp = eval(&probe)?;
            t.data_mut()[i] = base.data()[i] - h;
            probe.set_value(name, t)?;
            let fm = eval(&probe)?;
            report.record(i, analytic.data()[i], (fp - fm) / (2.0 * h));
        }
        probe.set_value(name, base)?;
        out.push((name.clone(), report));
    }
    Ok(out)
}
