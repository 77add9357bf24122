//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Perturbation and tolerance settings.
///
/// The error of one entry is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {:<32} entries={:<6} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.entries,
            self.max_rel_err
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks d f / d inputs, where `f` builds a scalar from leaves bound to `inputs`.
///
/// Inputs listed in `frozen` are bound as constants and not perturbed.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    frozen: &[bool],
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let is_frozen = |i: usize| frozen.get(i).copied().unwrap_or(false);
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), !is_frozen(i)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut entries = 0;
    for i in 0..inputs.len() {
        if is_frozen(i) {
            continue;
        }
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            max_err = max_err.max(relative_error(analytic.data()[k], numeric, cfg.floor));
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        entries,
        max_rel_err: max_err,
        passed: max_err <= cfg.tolerance,
    })
}

/// Checks the gradient of a scalar `f` with respect to every entry of every
/// tensor in `store`.
pub fn check_store_gradients<F>(
    name: &str,
    store: &ParamStore,
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; store.len()];
    for (pid, var) in tape.bound_params() {
        analytic[pid.index()] = grads.get(var).cloned();
    }

    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, s)?;
        Ok(tape.value(out).item())
    };
    let mut work = store.clone();
    let mut max_err = 0.0f64;
    let mut entries = 0;
    for id in store.ids() {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[k]);
            max_err = max_err.max(relative_error(a, numeric, cfg.floor));
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        entries,
        max_rel_err: max_err,
        passed: max_err <= cfg.tolerance,
    })
}

/// `sum(x ⊙ w)` for a constant weight tensor; turns any output into a scalar
/// without the cancellations a plain sum can hide.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}
