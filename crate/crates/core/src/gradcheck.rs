//! Central-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_of(&out)
}

fn scalar_of(out: &Var) -> Result<f64> {
    let v = out
        .value()
        .item()
        .map_err(|_| Error::Invalid(format!("grad_check needs a scalar function, output shape {:?}", out.shape())))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: function value {v}")));
    }
    Ok(v)
}

/// Max over all coordinates of all inputs of
/// `|analytic − central| / max(1, |central|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("grad_check step must be positive, got {step}")));
    }
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &leaves)?;
    scalar_of(&out)?;
    let grads = g.backward(&out, &Tensor::scalar(1.0))?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + step;
            let fp = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - step;
            let fm = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Graph, &Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, &xs[0]), std::slice::from_ref(x), step)
}
