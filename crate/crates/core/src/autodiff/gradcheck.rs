use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval(f: &impl Fn(&mut Tape<f64>, Var) -> Result<Var>, point: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    Ok(v.data()[0])
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all
/// coordinates of `point`.
pub fn grad_check(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, point: &Tensor<f64>, step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("leaf requires grad");

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric { op: "grad_check" });
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// [`grad_check`] with respect to one registered parameter, perturbed in
/// place of its stored value.
pub fn grad_check_param(
    store: &ParamStore<f64>,
    id: ParamId,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    step: f64,
) -> Result<f64> {
    grad_check(
        |tape, x| {
            tape.bind_param(id, x);
            f(tape, store)
        },
        store.tensor(id),
        step,
    )
}
