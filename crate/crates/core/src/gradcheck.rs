//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative error between analytic and numeric gradients.
///
/// `build` receives the inputs as trainable leaves and must return a scalar
/// loss. It is re-run for every perturbed element, so any randomness inside
/// it has to be re-seeded on each call. The error for one element is
/// `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let value = v.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(value)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            let (hi, lo) = (orig + eps, orig - eps);
            work[i].data_mut()[j] = hi;
            let up = eval(&work)?;
            work[i].data_mut()[j] = lo;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // divide by the step actually taken after rounding
            let numeric = (up - down) / (hi - lo);
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
