use super::params::Parameters;
use crate::error::{Error, Result};

/// A scalar loss of some parameters with its analytic gradient.
pub trait Objective {
    type Params: Parameters;

    fn loss(&self, params: &Self::Params) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }

    fn loss_and_grad(&self, params: &Self::Params) -> Result<(f64, Self::Params)>;
}

/// Analytic gradient of `objective` at `params`. Non-finite values are an error.
pub fn gradients<O: Objective>(objective: &O, params: &O::Params) -> Result<O::Params> {
    let (loss, grads) = objective.loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("gradient contains non-finite values".into()));
    }
    Ok(grads)
}
