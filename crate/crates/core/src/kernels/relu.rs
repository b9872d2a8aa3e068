use crate::error::{Error, Result};
use crate::numfmt::FxpTensor;

/// `max(0, x)` by a sign test on the mantissas.
pub fn fxp_relu(x: &FxpTensor) -> FxpTensor {
    x.with_mantissas(x.mantissas().iter().map(|&m| m.max(0)).collect())
}

/// Zeroes gradient entries where the forward input (or output) was not positive.
pub fn fxp_relu_backward(g: &FxpTensor, mask: &FxpTensor) -> Result<FxpTensor> {
    if g.shape() != mask.shape() {
        return Err(Error::shape("fxp_relu_backward", g.shape(), mask.shape()));
    }
    Ok(g.with_mantissas(
        g.mantissas()
            .iter()
            .zip(mask.mantissas())
            .map(|(&gm, &xm)| if xm > 0 { gm } else { 0 })
            .collect(),
    ))
}
