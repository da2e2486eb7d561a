use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` against central differences for every
/// entry of `params`. Returns `max |analytic − numeric| / max(1, |numeric|)`.
///
/// `f` must be deterministic in the parameters; any sampled noise has to be
/// frozen by the caller.
pub fn finite_diff_check<F>(store: &ParamStore, params: &[ParamId], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        let value = t.scalar(v);
        if !value.is_finite() {
            return Err(Error::Numeric { op: "finite_diff_check" });
        }
        Ok(value)
    };

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &id in params {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| ndarray::Array2::zeros(store.get(id).dim()));
        let shape = store.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = work.get(id)[[r, c]];
                work.get_mut(id)[[r, c]] = orig + step;
                let up = eval(&work)?;
                work.get_mut(id)[[r, c]] = orig - step;
                let down = eval(&work)?;
                work.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * step);
                let err = (analytic[[r, c]] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}
