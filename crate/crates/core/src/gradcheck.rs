//! Central finite-difference checks against reverse-mode gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! independent oracle for every backward rule in [`crate::graph`].

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst relative error seen, and where. `kink_margin` is the closest any
/// ReLU input came to zero at the unperturbed point.
#[derive(Clone, Debug)]
pub struct Report {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    pub kink_margin: f64,
}

impl Report {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            checked: 0,
            kink_margin: f64::INFINITY,
        }
    }

    fn record(&mut self, what: &str, analytic: &[f64], numeric: &[f64]) {
        let err = rel_err(analytic, numeric);
        self.checked += analytic.len();
        if err >= self.max_rel_err {
            self.max_rel_err = err;
            self.worst = what.to_string();
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// True when no ReLU input lies within `h` of its kink.
    pub fn smooth_at(&self, h: f64) -> bool {
        self.kink_margin > h
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with gradients that are both numerically zero
/// counting as agreement.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Checks gradients of a scalar function with respect to each input tensor.
/// `f` receives a graph (training mode with `seed`, no parameters) and one
/// leaf per input.
pub fn check_inputs<F>(inputs: &[Tensor], seed: Option<u64>, h: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = fresh(None, seed);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = fresh(None, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = Report::new();
    report.kink_margin = g.kink_margin();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        report.record(&format!("input {i}"), &analytic, &numeric);
    }
    Ok(report)
}

/// Checks gradients of a scalar function with respect to every trainable
/// parameter in `store`.
pub fn check_params<F>(store: &ParamStore, seed: Option<u64>, h: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let (grads, margin) = {
        let mut g = fresh(Some(store), seed);
        let out = f(&mut g)?;
        (g.backward(out)?, g.kink_margin())
    };
    let mut work = store.clone();
    let mut report = Report::new();
    report.kink_margin = margin;
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight && !p.frozen)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.value(id).numel();
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let up = {
                let mut g = fresh(Some(&work), seed);
                let out = f(&mut g)?;
                g.value(out).item()
            };
            work.value_mut(id).data_mut()[j] = orig - h;
            let down = {
                let mut g = fresh(Some(&work), seed);
                let out = f(&mut g)?;
                g.value(out).item()
            };
            work.value_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        report.record(&store.get(id).name, &analytic, &numeric);
    }
    Ok(report)
}

fn fresh(store: Option<&ParamStore>, seed: Option<u64>) -> Graph<'_> {
    let g = match store {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    };
    match seed {
        Some(s) => g.training(s),
        None => g,
    }
}
