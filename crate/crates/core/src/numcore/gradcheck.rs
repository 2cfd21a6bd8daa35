//! Central-difference gradient checking against the tape.

use crate::error::{LslaError, Result};
use crate::numcore::params::{Bound, ParamStore};
use crate::numcore::tape::{Tape, Var};

/// Worst-case disagreement between reverse-mode and finite-difference
/// gradients for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

/// Relative errors use `|a - n| / max(|a|, |n|, REL_FLOOR)` so coordinates
/// whose true gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

fn evaluate<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(LslaError::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Checks every coordinate of every parameter in `params`.
pub fn fd_gradcheck<F>(params: &ParamStore, h: f64, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    fd_gradcheck_subset(params, &names, h, usize::MAX, f)
}

/// Checks only the named parameters, at most `max_coords` evenly spaced
/// coordinates per tensor.
pub fn fd_gradcheck_subset<F>(
    params: &ParamStore,
    names: &[String],
    h: f64,
    max_coords: usize,
    f: F,
) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    if !tape.scalar(out).is_finite() {
        return Err(LslaError::NonFinite(format!("objective evaluated to {}", tape.scalar(out))));
    }
    tape.backward(out)?;

    let mut work = params.clone();
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let numel = params.get(name)?.numel();
        let analytic = tape
            .grad(bound.get(name)?)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let stride = numel.div_ceil(max_coords.max(1)).max(1);
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for j in (0..numel).step_by(stride) {
            let orig = work.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + h;
            let fp = evaluate(&work, &f)?;
            work.get_mut(name)?.data_mut()[j] = orig - h;
            let fm = evaluate(&work, &f)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        reports.push(GradReport {
            name: name.clone(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}

pub fn worst_rel(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
