//! Central-difference gradient checks.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of the scalar `f` at `x`
/// and central differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = f(&mut tape, v)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but over every parameter of `store`. `f` must read
/// parameters only through the tape it is given. Every `stride`-th scalar is
/// checked (1 = all).
pub fn grad_check_params<F>(store: &ParamStore, eps: f64, stride: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };

    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let stride = stride.max(1);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let mut counter = 0usize;
    for id in store.ids() {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.value(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in 0..n {
            counter += 1;
            if (counter - 1) % stride != 0 {
                continue;
            }
            let orig = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
