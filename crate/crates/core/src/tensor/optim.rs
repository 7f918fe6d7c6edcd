use super::Tensor;
use crate::error::{Error, Result};

/// `p ← p − lr·grad(p)` for every parameter, then clears the gradients.
///
/// Every parameter must carry a gradient; nothing is updated otherwise.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Contract(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        for (v, g) in p.data.iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}
