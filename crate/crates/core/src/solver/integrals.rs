//! Exponential-integrator weights.
//!
//! Every step in this crate has the form
//! `x_new = a * x_old + sum_j b_j * beta_j`, where the `beta_j` are buffered
//! model outputs. The `b_j` come from integrating the Lagrange basis
//! polynomials of the nodes against an exponential kernel.

use crate::error::{Error, Result};
use crate::model::Parameterization;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// `m_k = int_0^h exp(u - h) u^k du` for `k = 0..=k_max`.
///
/// Small gaps use the positive series
/// `m_k = exp(-h) sum_n h^(n+k+1) / (n! (n+k+1))`, which avoids the
/// cancellation in the recurrence `m_k = h^k - k m_(k-1)` used otherwise.
pub fn exp_integrals<T: Scalar>(h: T, k_max: usize) -> Result<Vec<T>> {
    if !(h > T::zero()) || !h.is_finite() {
        return Err(Error::Contract(format!("exponential integral needs h > 0, got {h}")));
    }
    let mut m = Vec::with_capacity(k_max + 1);
    if h <= T::one() {
        let decay = (-h).exp();
        for k in 0..=k_max {
            let kk = T::from_usize(k).unwrap();
            // term_n = h^(n+k+1) / n!
            let mut term = h.powi(k as i32 + 1);
            let mut sum = term / (kk + T::one());
            for n in 1..200 {
                let nn = T::from_usize(n).unwrap();
                term = term * h / nn;
                let add = term / (nn + kk + T::one());
                sum = sum + add;
                if add <= sum * T::epsilon() {
                    break;
                }
            }
            m.push(decay * sum);
        }
    } else {
        m.push(-(-h).exp_m1());
        for k in 1..=k_max {
            let prev = m[k - 1];
            m.push(h.powi(k as i32) - T::from_usize(k).unwrap() * prev);
        }
    }
    Ok(m)
}

/// Coefficients of one exponential-integrator step from `t_from` to `t_to`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients<T> {
    /// Multiplier of the current state.
    pub a: T,
    /// Weight of each node's output, in the order the nodes were given.
    pub b: Vec<T>,
    /// Log-SNR gap `lambda(t_to) - lambda(t_from)`.
    pub h: T,
}

/// Monomial coefficients of the Lagrange basis polynomial for node `j`.
fn basis_monomials<T: Scalar>(offsets: &[T], j: usize) -> Result<Vec<T>> {
    let mut poly = vec![T::one()];
    let mut denom = T::one();
    for (l, &ol) in offsets.iter().enumerate() {
        if l == j {
            continue;
        }
        let d = offsets[j] - ol;
        if d == T::zero() {
            return Err(Error::Contract("duplicate interpolation node".into()));
        }
        denom = denom * d;
        let mut next = vec![T::zero(); poly.len() + 1];
        for (k, &c) in poly.iter().enumerate() {
            next[k + 1] = next[k + 1] + c;
            next[k] = next[k] - ol * c;
        }
        poly = next;
    }
    Ok(poly.into_iter().map(|c| c / denom).collect())
}

/// Integrates the interpolant through `node_times` exactly.
///
/// For data prediction the step is
/// `x_t = (sigma_t/sigma_s) x_s + sigma_t int e^lambda P(lambda) dlambda`,
/// with the polynomial expanded around `lambda_s`. For noise prediction it is
/// `x_t = (alpha_t/alpha_s) x_s - alpha_t int e^(-lambda) P(lambda) dlambda`,
/// expanded around `lambda_t`.
pub fn step_coefficients<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    t_from: T,
    t_to: T,
    node_times: &[T],
    param: Parameterization,
) -> Result<StepCoefficients<T>> {
    if node_times.is_empty() {
        return Err(Error::WarmUp { needed: 1, available: 0 });
    }
    let from = schedule.marginal(t_from);
    let to = schedule.marginal(t_to);
    let h = to.lambda - from.lambda;
    if !(h > T::zero()) {
        return Err(Error::Contract(format!(
            "step must increase log-SNR: t_from={t_from}, t_to={t_to}"
        )));
    }
    let lambdas: Vec<T> = node_times.iter().map(|&t| schedule.lambda(t)).collect();
    let (a, scale, offsets): (T, T, Vec<T>) = match param {
        Parameterization::DataPred => (
            to.sigma / from.sigma,
            to.alpha,
            lambdas.iter().map(|&l| l - from.lambda).collect(),
        ),
        Parameterization::NoisePred => (
            to.alpha / from.alpha,
            -to.alpha * from.sigma / from.alpha,
            lambdas.iter().map(|&l| to.lambda - l).collect(),
        ),
        Parameterization::VPred => {
            return Err(Error::Config("v-prediction is not a working parameterization".into()))
        }
    };
    let m = exp_integrals(h, offsets.len() - 1)?;
    let b = (0..offsets.len())
        .map(|j| {
            let c = basis_monomials(&offsets, j)?;
            Ok(scale * c.iter().zip(&m).map(|(&ci, &mi)| ci * mi).sum::<T>())
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(StepCoefficients { a, b, h })
}
