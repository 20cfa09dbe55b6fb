//! Central finite-difference verification of tape gradients.

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::parallel;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_analytic − g_numeric| / max(1, |g_numeric|)` over checked coordinates.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks a scalar function of one array at every coordinate.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<GradCheckReport>
where
    T: Element,
    F: for<'t> Fn(&Var<'t, T>) -> Result<Var<'t, T>> + Sync,
{
    let coords: Vec<(usize, usize)> = (0..x.len()).map(|i| (0, i)).collect();
    grad_check_coords(|_, xs| f(&xs[0]), std::slice::from_ref(x), eps, &coords)
}

/// Checks a scalar function of several arrays at the listed
/// `(input index, flat coordinate)` pairs. Coordinates are evaluated
/// independently, each on its own inference tape.
pub fn grad_check_coords<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: T,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    T: Element,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>> + Sync,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        check_finite(out.value())?;
        let grads = tape.backward(&out)?;
        vars.iter()
            .map(|v| grads.get(v).cloned().expect("leaf gradient"))
            .collect()
    };

    let eval = |shifted: Vec<Tensor<T>>| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = shifted.into_iter().map(|t| tape.constant(t)).collect();
        let out = f(&tape, &vars)?;
        check_finite(out.value())?;
        Ok(out.value().data()[0].to_f64().unwrap())
    };

    let eps64 = eps.to_f64().unwrap();
    let errors = parallel::map_indices(coords.len(), |ci| -> Result<f64> {
        let (which, i) = coords[ci];
        let shift = |delta: T| {
            let mut xs = inputs.to_vec();
            xs[which].data_mut()[i] += delta;
            xs
        };
        let plus = eval(shift(eps))?;
        let minus = eval(shift(-eps))?;
        let numeric = (plus - minus) / (2.0 * eps64);
        let a = analytic[which].data()[i].to_f64().unwrap();
        Ok((a - numeric).abs() / numeric.abs().max(1.0))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: coords.len(),
    };
    for (ci, e) in errors.into_iter().enumerate() {
        let e = e?;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = coords[ci];
        }
    }
    Ok(report)
}

fn check_finite<T: Element>(t: &Tensor<T>) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::Validation(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }
    Ok(())
}
