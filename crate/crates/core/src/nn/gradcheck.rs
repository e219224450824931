//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is checking.

use super::params::{GradStore, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Safety factor on the rounding-noise estimate of a central difference.
const RESOLUTION_FACTOR: f64 = 4.0;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (tensor name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Max relative error per tensor, in store order.
    pub per_tensor: Vec<(String, f64)>,
    /// Per-entry errors, kept so that [`GradCheck::passes`] can decide per entry.
    entries: Vec<Entry>,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    abs_error: f64,
    rel_error: f64,
    resolution: f64,
}

fn resolution(up: f64, down: f64, eps: f64) -> f64 {
    RESOLUTION_FACTOR * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / eps
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

impl GradCheck {
    /// Every entry is within `rel_tol` relative error, or its absolute error
    /// is below the rounding resolution of its central difference
    /// (about `ε_mach · |f| / ε`), where a relative comparison says nothing.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.entries
            .iter()
            .all(|e| e.rel_error <= rel_tol || e.abs_error <= e.resolution)
    }

    /// Entries that pass only through the resolution clause.
    pub fn below_resolution(&self, rel_tol: f64) -> usize {
        self.entries
            .iter()
            .filter(|e| e.rel_error > rel_tol && e.abs_error <= e.resolution)
            .count()
    }

    /// Largest rounding resolution over all entries.
    pub fn max_resolution(&self) -> f64 {
        self.entries.iter().map(|e| e.resolution).fold(0.0, f64::max)
    }

    /// Merges another check into this one.
    pub fn absorb(&mut self, other: GradCheck) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        for (name, err) in other.per_tensor {
            match self.per_tensor.iter_mut().find(|(n, _)| *n == name) {
                Some((_, e)) => *e = e.max(err),
                None => self.per_tensor.push((name, err)),
            }
        }
        self.entries.extend(other.entries);
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, resolution: f64) {
        let err = relative_error(analytic, numeric);
        self.entries.push(Entry {
            abs_error: (analytic - numeric).abs(),
            rel_error: err,
            resolution,
        });
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
        match self.per_tensor.last_mut() {
            Some((n, e)) if n == name => *e = e.max(err),
            _ => self.per_tensor.push((name.to_string(), err)),
        }
    }
}

/// Checks gradients with respect to free input tensors.
pub fn check_variable_gradients<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheck::default();
    for (i, input) in inputs.iter().enumerate() {
        let name = format!("input{i}");
        let zeros = Tensor::zeros(input.rows(), input.cols());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zeros);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let (up, down) = (eval(&plus)?, eval(&minus)?);
            let numeric = (up - down) / (2.0 * eps);
            report.record(&name, j, analytic.data()[j], numeric, resolution(up, down, eps));
        }
    }
    Ok(report)
}

/// Checks every entry of every parameter in `store`.
///
/// `loss` builds a scalar on a tape bound to whichever store it is handed,
/// so that perturbed copies can be evaluated with the same closure.
pub fn check_param_gradients<F>(store: &ParamStore, loss: F, eps: f64) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut grads = GradStore::zeros_like(store);
    {
        let mut tape = Tape::with_params(store);
        let root = loss(&mut tape)?;
        tape.backward_into(root, &mut grads)?;
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let root = loss(&mut tape)?;
        Ok(tape.value(root).item())
    };

    let mut report = GradCheck::default();
    let mut work = store.clone();
    for id in store.ids() {
        let name = store.name(id).to_string();
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            report.record(&name, j, grads.get(id).data()[j], numeric, resolution(up, down, eps));
        }
    }
    Ok(report)
}
