//! Central finite-difference gradient checking against the tape.

use super::scalar::{fromf64, tof64, Scalar};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn eval_scalar<T: Scalar, F>(params: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut frozen = p.clone();
            frozen.set_requires_grad(false);
            tape.leaf(&frozen)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != [1, 1] {
        return Err(Error::Dim {
            op: "grad_check",
            lhs: tape.shape(out).to_vec(),
            rhs: vec![1, 1],
        });
    }
    Ok(tof64(tape.scalar_value(out)))
}

/// Compares tape gradients of the scalar function `f` against central finite
/// differences with step `fd_step`, over every element of every parameter.
/// Relative error uses `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<T: Scalar, F>(params: &[Tensor<T>], f: &F, fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut live = p.clone();
            live.set_requires_grad(true);
            tape.leaf(&live)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != [1, 1] {
        return Err(Error::Dim {
            op: "grad_check",
            lhs: tape.shape(out).to_vec(),
            rhs: vec![1, 1],
        });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| match grads.get(*v) {
            Some(g) => g.iter().map(|&x| tof64(x)).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + fromf64::<T>(fd_step);
            let up = eval_scalar(&work, f)?;
            work[pi].data_mut()[k] = orig - fromf64::<T>(fd_step);
            let down = eval_scalar(&work, f)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * fd_step);
            let a = analytic[pi][k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::training(format!(
                    "non-finite gradient during check at param {pi} element {k}"
                )));
            }
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_index = k;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
