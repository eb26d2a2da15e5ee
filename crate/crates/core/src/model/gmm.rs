use serde::{Deserialize, Serialize};

use super::{DenoisingModel, ModelOutput, Parameterization};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Isotropic Gaussian mixture data distribution with the exact noise
/// predictor of its diffused marginals.
///
/// Every component has covariance `scale^2 I`. Passing `cond = Some(k)`
/// restricts the data distribution to component `k`, which makes the mixture
/// a class-conditional model suitable for guidance experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct GaussianMixture<T> {
    means: Vec<Vec<T>>,
    weights: Vec<T>,
    scale: T,
    schedule: NoiseSchedule<T>,
}

impl<T: Scalar> GaussianMixture<T> {
    pub fn new(means: Vec<Vec<T>>, weights: Vec<T>, scale: T, schedule: NoiseSchedule<T>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if weights.len() != means.len() {
            return Err(Error::Config(format!(
                "{} weights for {} components",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| !(*w > T::zero())) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(16.0)) {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        if !(scale > T::zero()) {
            return Err(Error::Config(format!("mixture scale must be positive, got {scale}")));
        }
        Ok(GaussianMixture {
            means,
            weights,
            scale,
            schedule,
        })
    }

    /// Single Gaussian `N(mean, scale^2 I)`.
    pub fn single(mean: Vec<T>, scale: T, schedule: NoiseSchedule<T>) -> Result<Self> {
        Self::new(vec![mean], vec![T::one()], scale, schedule)
    }

    pub fn means(&self) -> &[Vec<T>] {
        &self.means
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Exact `eps*(x, t) = -sigma_t grad log q_t(x)`.
    pub fn noise_prediction(&self, x: &[T], t: T, cond: Option<u32>) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "input has dim {}, model dim is {}",
                x.len(),
                self.dim()
            )));
        }
        let (alpha, sigma, _) = self.schedule.alpha_sigma_lambda(t)?;
        let var = alpha * alpha * self.scale * self.scale + sigma * sigma;
        let active: Vec<usize> = match cond {
            None => (0..self.means.len()).collect(),
            Some(k) if (k as usize) < self.means.len() => vec![k as usize],
            Some(k) => {
                return Err(Error::Contract(format!(
                    "condition {k} out of range for {} components",
                    self.means.len()
                )))
            }
        };

        // posterior component weights in log space
        let half = T::lit(0.5);
        let logits: Vec<T> = active
            .iter()
            .map(|&j| {
                let d2: T = x
                    .iter()
                    .zip(&self.means[j])
                    .map(|(&xi, &mi)| (xi - alpha * mi) * (xi - alpha * mi))
                    .sum();
                self.weights[j].ln() - half * d2 / var
            })
            .collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let unnorm: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: T = unnorm.iter().copied().sum();

        let coef = sigma / var;
        let mut eps = vec![T::zero(); x.len()];
        for (&j, &u) in active.iter().zip(&unnorm) {
            let w = u / z;
            for (e, (&xi, &mi)) in eps.iter_mut().zip(x.iter().zip(&self.means[j])) {
                *e = *e + w * coef * (xi - alpha * mi);
            }
        }
        Ok(eps)
    }

    /// Exact probability-flow ODE solution for a single-component model.
    ///
    /// The normalized deviation `(x - alpha_t mu) / c_t` with
    /// `c_t = sqrt(alpha_t^2 s^2 + sigma_t^2)` is conserved along the flow.
    pub fn flow_solution(&self, x_from: &[T], t_from: T, t_to: T) -> Result<Vec<T>> {
        if self.means.len() != 1 {
            return Err(Error::Contract(
                "closed-form flow only exists for a single component".into(),
            ));
        }
        let (a0, s0, _) = self.schedule.alpha_sigma_lambda(t_from)?;
        let (a1, s1, _) = self.schedule.alpha_sigma_lambda(t_to)?;
        let sc2 = self.scale * self.scale;
        let c0 = (a0 * a0 * sc2 + s0 * s0).sqrt();
        let c1 = (a1 * a1 * sc2 + s1 * s1).sqrt();
        Ok(x_from
            .iter()
            .zip(&self.means[0])
            .map(|(&x, &mu)| a1 * mu + c1 / c0 * (x - a0 * mu))
            .collect())
    }
}

impl<T: Scalar> DenoisingModel<T> for GaussianMixture<T> {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn evaluate(&self, x: &[T], t: T, cond: Option<u32>) -> Result<ModelOutput<T>> {
        Ok(ModelOutput::new(
            Parameterization::NoisePred,
            self.noise_prediction(x, t, cond)?,
            t,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule<f64> {
        NoiseSchedule::vp_linear_default()
    }

    #[test]
    fn single_component_formula() {
        let g = GaussianMixture::single(vec![0.5, -1.0], 0.3, sched()).unwrap();
        let m = sched().marginal(0.4);
        let x = [0.2, 0.9];
        let eps = g.noise_prediction(&x, 0.4, None).unwrap();
        let var = m.alpha * m.alpha * 0.09 + m.sigma * m.sigma;
        for i in 0..2 {
            let mu = g.means()[0][i];
            assert!((eps[i] - m.sigma * (x[i] - m.alpha * mu) / var).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_at_scaled_mean() {
        let g = GaussianMixture::single(vec![0.5, -1.0], 0.3, sched()).unwrap();
        let a = sched().marginal(0.6).alpha;
        let eps = g.noise_prediction(&[0.5 * a, -a], 0.6, None).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn condition_selects_component() {
        let g = GaussianMixture::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5], 0.2, sched()).unwrap();
        let single = GaussianMixture::single(vec![-1.0], 0.2, sched()).unwrap();
        let a = g.noise_prediction(&[0.3], 0.5, Some(1)).unwrap();
        let b = single.noise_prediction(&[0.3], 0.5, None).unwrap();
        assert_eq!(a, b);
        assert!(g.noise_prediction(&[0.3], 0.5, Some(2)).is_err());
    }

    #[test]
    fn far_from_modes_stays_finite() {
        let g = GaussianMixture::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5], 0.01, sched()).unwrap();
        let eps = g.noise_prediction(&[400.0], 1e-3, None).unwrap();
        assert!(eps[0].is_finite());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GaussianMixture::new(vec![vec![1.0]], vec![0.7], 0.1, sched()).is_err());
        assert!(GaussianMixture::new(vec![vec![1.0]], vec![1.0], 0.0, sched()).is_err());
        assert!(GaussianMixture::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0.5, 0.5], 0.1, sched()).is_err());
        assert!(GaussianMixture::<f64>::new(vec![], vec![], 0.1, sched()).is_err());
    }
}
