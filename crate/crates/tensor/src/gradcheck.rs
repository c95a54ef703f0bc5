//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root).item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares tape gradients of the scalar program `f` against central
/// differences with step `1e-5`.
///
/// Each parameter is checked on every coordinate when it has at most
/// `max_coords` entries, otherwise on `max_coords` coordinates drawn from
/// `rng`.
pub fn grad_check<F>(f: F, params: &[Tensor], rng: &mut Rng, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = params[pi].len();
        let coords = if n <= max_coords {
            (0..n).collect()
        } else {
            rng.sample_indices(n, max_coords)
        };
        for c in coords {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + FD_STEP;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig - FD_STEP;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic.data()[c], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
