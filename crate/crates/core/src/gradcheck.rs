//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every backward rule it checks.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// Max over inputs of `|a - f|_inf / max(|a|_inf, |f|_inf, 1e-8)`.
    pub max_rel_err: f64,
}

/// Relative error between two gradient vectors, normalized by the larger
/// infinity norm.
pub fn relative_error(a: &[f64], f: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(f)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(f).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid("gradcheck function must return a scalar"));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar_value(o))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
    })
}

/// Central differences of `eval` with respect to every entry of `store`,
/// compared against `analytic` (one vector per parameter, in store order).
pub fn check_store<F>(store: &ParamStore, analytic: &[Vec<f64>], h: f64, eval: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if analytic.len() != store.len() {
        return Err(Error::invalid(
            "one analytic gradient per parameter is required",
        ));
    }
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut g = vec![0.0; a.len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work.get(i).data()[j];
            work.get_mut(i).data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.get_mut(i).data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.get_mut(i).data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(a, &g));
    }
    Ok(worst)
}
