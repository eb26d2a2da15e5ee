//! Denoiser abstraction, output parameterizations and reference models.

mod gmm;
mod guidance;
pub mod remote;
pub mod wire;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

pub use gmm::GaussianMixture;
pub use guidance::{cfg_combine, GuidedModel};
pub use remote::RemoteDenoiser;

/// What a denoiser output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Noise prediction `eps`.
    #[serde(alias = "eps")]
    NoisePred,
    /// Data prediction `x_0`.
    #[default]
    #[serde(alias = "x0")]
    DataPred,
    /// Velocity `v = alpha eps - sigma x_0`.
    #[serde(alias = "v")]
    VPred,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [Self::NoisePred, Self::DataPred, Self::VPred];

    /// Short name used on the wire.
    pub fn wire_name(self) -> &'static str {
        match self {
            Self::NoisePred => "eps",
            Self::DataPred => "x0",
            Self::VPred => "v",
        }
    }

    pub fn from_wire_name(s: &str) -> Option<Self> {
        match s {
            "eps" => Some(Self::NoisePred),
            "x0" => Some(Self::DataPred),
            "v" => Some(Self::VPred),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub param: Parameterization,
    pub value: Vec<T>,
    pub t: T,
}

impl<T: Scalar> ModelOutput<T> {
    pub fn new(param: Parameterization, value: Vec<T>, t: T) -> Self {
        ModelOutput { param, value, t }
    }
}

/// Reinterprets `out` (produced at state `x`) in the `target` parameterization.
///
/// Uses `x = alpha x_0 + sigma eps` and `v = alpha eps - sigma x_0`, which are
/// mutually consistent when `alpha^2 + sigma^2 = 1`.
pub fn convert<T: Scalar>(
    out: &ModelOutput<T>,
    x: &[T],
    schedule: &NoiseSchedule<T>,
    target: Parameterization,
) -> Result<ModelOutput<T>> {
    if out.param == target {
        return Ok(out.clone());
    }
    if x.len() != out.value.len() {
        return Err(Error::Contract(format!(
            "state has dim {}, model output has dim {}",
            x.len(),
            out.value.len()
        )));
    }
    let (alpha, sigma, _) = schedule.alpha_sigma_lambda(out.t)?;
    let value = x
        .iter()
        .zip(&out.value)
        .map(|(&xi, &vi)| {
            let (x0, eps) = match out.param {
                Parameterization::NoisePred => ((xi - sigma * vi) / alpha, vi),
                Parameterization::DataPred => (vi, (xi - alpha * vi) / sigma),
                Parameterization::VPred => (alpha * xi - sigma * vi, sigma * xi + alpha * vi),
            };
            match target {
                Parameterization::NoisePred => eps,
                Parameterization::DataPred => x0,
                Parameterization::VPred => alpha * eps - sigma * x0,
            }
        })
        .collect();
    Ok(ModelOutput {
        param: target,
        value,
        t: out.t,
    })
}

/// A (possibly conditional) denoising network. Implementations must be
/// deterministic: identical `(x, t, cond)` yields identical output.
pub trait DenoisingModel<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[T], t: T, cond: Option<u32>) -> Result<ModelOutput<T>>;
}

impl<T: Scalar, M: DenoisingModel<T> + ?Sized> DenoisingModel<T> for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn evaluate(&self, x: &[T], t: T, cond: Option<u32>) -> Result<ModelOutput<T>> {
        (**self).evaluate(x, t, cond)
    }
}

impl<T: Scalar, M: DenoisingModel<T> + ?Sized> DenoisingModel<T> for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn evaluate(&self, x: &[T], t: T, cond: Option<u32>) -> Result<ModelOutput<T>> {
        (**self).evaluate(x, t, cond)
    }
}

/// Wraps a model and counts evaluations.
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<T: Scalar, M: DenoisingModel<T>> DenoisingModel<T> for CountingModel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate(&self, x: &[T], t: T, cond: Option<u32>) -> Result<ModelOutput<T>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(x, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v_to_data_at_half_noise() {
        // alpha = sigma = sqrt(2)/2 at lambda = 0
        let s = NoiseSchedule::<f64>::vp_linear_default();
        let t = s.inverse_lambda(0.0).unwrap();
        let m = s.marginal(t);
        assert!((m.alpha - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        let out = ModelOutput::new(Parameterization::VPred, vec![0.0, 1.0], t);
        let x0 = convert(&out, &[1.0, 0.0], &s, Parameterization::DataPred).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((x0.value[0] - h).abs() < 1e-10);
        assert!((x0.value[1] + h).abs() < 1e-10);
    }

    #[test]
    fn v_to_data_near_clean_end_is_identity() {
        let s = NoiseSchedule::<f64>::new(crate::schedule::ScheduleKind::vp_linear_default(), 1.0, 1e-12).unwrap();
        let out = ModelOutput::new(Parameterization::VPred, vec![0.3, -2.0], 1e-12);
        let x = [0.7, 1.1];
        let x0 = convert(&out, &x, &s, Parameterization::DataPred).unwrap();
        for (a, b) in x0.value.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn noise_data_round_trip() {
        let s = NoiseSchedule::<f64>::vp_linear_default();
        let x = [0.4, -1.3, 2.0];
        let eps = ModelOutput::new(Parameterization::NoisePred, vec![0.1, 0.5, -0.9], 0.4);
        let x0 = convert(&eps, &x, &s, Parameterization::DataPred).unwrap();
        let m = s.marginal(0.4);
        for i in 0..3 {
            assert!((x0.value[i] - (x[i] - m.sigma * eps.value[i]) / m.alpha).abs() < 1e-15);
        }
        let back = convert(&x0, &x, &s, Parameterization::NoisePred).unwrap();
        for i in 0..3 {
            assert!((back.value[i] - eps.value[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn same_param_is_identity() {
        let s = NoiseSchedule::<f64>::vp_linear_default();
        let out = ModelOutput::new(Parameterization::VPred, vec![1.0, 2.0], 0.3);
        assert_eq!(convert(&out, &[0.0, 0.0], &s, Parameterization::VPred).unwrap(), out);
    }

    #[test]
    fn conversion_range_checked() {
        let s = NoiseSchedule::<f64>::vp_linear_default();
        let out = ModelOutput::new(Parameterization::VPred, vec![1.0], 2.0);
        assert!(convert(&out, &[0.0], &s, Parameterization::DataPred).is_err());
    }
}
