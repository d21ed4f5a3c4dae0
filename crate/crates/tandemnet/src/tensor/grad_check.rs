//! Finite-difference validation of reverse-mode gradients.
//!
//! `grad_check` runs the supplied graph builder once with autodiff and then
//! re-evaluates it 2·N times with central differences. The builder must be
//! deterministic: anything stochastic (dropout masks) has to be derived from
//! state fixed inside the closure.

use super::tape::{Tape, TensorId};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Max relative error between analytic and central-difference gradients over
/// every element of every input. Relative error uses max(|a|, |n|, 1) as the
/// denominator so near-zero gradients are compared absolutely.
#[allow(clippy::needless_range_loop)] // element index drives three parallel buffers
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: Elem) -> Result<Elem>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.var(t)).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::dim("grad_check", format!("loss has {} elements", tape.data(loss).len())));
        }
        let v = tape.data(loss)[0];
        if !v.is_finite() {
            return Err(Error::numeric("grad_check", format!("loss is {v}")));
        }
        Ok((tape, ids, loss))
    };

    let (mut tape, ids, loss) = eval(inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<Elem>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| tape.grad(*id).map_or_else(|| vec![0.0; t.numel()], <[Elem]>::to_vec))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: Elem = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (t_plus, _, l_plus) = eval(&work)?;
            let f_plus = t_plus.data(l_plus)[0];
            work[i].data_mut()[j] = orig - eps;
            let (t_minus, _, l_minus) = eval(&work)?;
            let f_minus = t_minus.data(l_minus)[0];
            work[i].data_mut()[j] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
