use super::{convert, DenoisingModel, ModelOutput, Parameterization};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Classifier-free guidance in noise space: `s eps_cond + (1 - s) eps_uncond`.
pub fn cfg_combine<T: Scalar>(
    eps_cond: &ModelOutput<T>,
    eps_uncond: &ModelOutput<T>,
    scale: T,
) -> Result<ModelOutput<T>> {
    if eps_cond.t != eps_uncond.t {
        return Err(Error::Contract(format!(
            "guidance branches evaluated at different times ({} vs {})",
            eps_cond.t, eps_uncond.t
        )));
    }
    if eps_cond.param != Parameterization::NoisePred || eps_uncond.param != Parameterization::NoisePred {
        return Err(Error::Contract("guidance is combined in noise-prediction space".into()));
    }
    if eps_cond.value.len() != eps_uncond.value.len() {
        return Err(Error::Contract("guidance branches differ in dimension".into()));
    }
    let one_minus = T::one() - scale;
    let value = eps_cond
        .value
        .iter()
        .zip(&eps_uncond.value)
        .map(|(&c, &u)| scale * c + one_minus * u)
        .collect();
    Ok(ModelOutput::new(Parameterization::NoisePred, value, eps_cond.t))
}

/// A conditional model evaluated with classifier-free guidance.
///
/// Each call runs the conditional and unconditional branches and combines
/// them in noise space. One guided call counts as one function evaluation.
pub struct GuidedModel<M, T> {
    inner: M,
    cond: u32,
    scale: T,
    schedule: NoiseSchedule<T>,
}

impl<M: DenoisingModel<T>, T: Scalar> GuidedModel<M, T> {
    pub fn new(inner: M, cond: u32, scale: T, schedule: NoiseSchedule<T>) -> Self {
        GuidedModel {
            inner,
            cond,
            scale,
            schedule,
        }
    }

    pub fn scale(&self) -> T {
        self.scale
    }
}

impl<M: DenoisingModel<T>, T: Scalar> DenoisingModel<T> for GuidedModel<M, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// The `cond` argument is ignored; the guided condition is fixed at
    /// construction.
    fn evaluate(&self, x: &[T], t: T, _cond: Option<u32>) -> Result<ModelOutput<T>> {
        let c = self.inner.evaluate(x, t, Some(self.cond))?;
        let u = self.inner.evaluate(x, t, None)?;
        let c = convert(&c, x, &self.schedule, Parameterization::NoisePred)?;
        let u = convert(&u, x, &self.schedule, Parameterization::NoisePred)?;
        cfg_combine(&c, &u, self.scale)
    }
}
