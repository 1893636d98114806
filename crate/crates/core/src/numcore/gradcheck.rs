//! Central finite-difference gradient checking.

use super::params::{Ctx, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::NumError;

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of a scalar function against central differences
/// with step `h` for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: err,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Finite-difference check over every trainable entry of a parameter store.
///
/// `f` builds a scalar loss on a fresh [`Ctx`]; the context's train flag is
/// set so batch statistics are recomputed for each perturbation.
pub fn check_param_gradients<F, E>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Ctx) -> Result<Var, E>,
    E: From<NumError>,
{
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut ctx = Ctx::new(s, true);
        let out = f(&mut ctx)?;
        Ok(ctx.tape.value(out).item())
    };
    let analytic = {
        let mut ctx = Ctx::new(store, true);
        let out = f(&mut ctx)?;
        let grads = ctx.tape.backward(out)?;
        ctx.param_grads(&grads)
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.index()].data()[j];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: err,
                    worst: (id.index(), j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
