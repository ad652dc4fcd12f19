use super::tape::{Tape, TensorId};
use super::value::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub elements: usize,
}

/// Compares the tape gradient of `f` with respect to `param` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, element by element.
///
/// `f` builds the computation on a fresh tape each call; it receives the
/// handle under which `param` was registered and returns a one-element loss.
/// The per-element error is `|g − fd| / (|g| + |g − fd| + 1e-12)`.
pub fn finite_diff_gradcheck<F>(f: F, param: &Tensor<f64>, eps: f64, exec: Exec) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId> + Sync + Send,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if let Some(index) = param.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }

    let mut tape = Tape::new();
    let id = tape.param(param, true);
    let loss = f(&mut tape, id)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(id)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; param.numel()]);
    if let Some(index) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }

    let eval = |values: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.param(&values, true);
        let loss = f(&mut tape, id)?;
        Ok(tape.data(loss)[0])
    };
    let indices: Vec<usize> = (0..param.numel()).collect();
    let errors = exec.map(&indices, |&i| -> Result<f64> {
        let mut plus = param.clone();
        plus.data_mut()[i] += eps;
        let mut minus = param.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let fd = (fp - fm) / (2.0 * eps);
        if !fd.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let g = analytic[i];
        let diff = (g - fd).abs();
        Ok(diff / (g.abs() + diff + 1e-12))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        elements: param.numel(),
    };
    for (i, err) in errors.into_iter().enumerate() {
        let err = err?;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
