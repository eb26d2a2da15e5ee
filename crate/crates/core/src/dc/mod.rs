//! Dynamic compensation of the model-output buffer.
//!
//! After step `i` the newest buffered output was computed at the predicted
//! point rather than the corrected one. Compensation replaces it with a
//! Lagrange estimate at `t' = rho t_i + (1 - rho) t_(i-1)`, interpolating the
//! `K + 1` newest buffered outputs in raw time.

mod schedule_file;
mod search;

use num_traits::Num;

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::scalar::Scalar;
use crate::solver::Buffer;

pub use schedule_file::{CompensationSchedule, ScheduleMeta, SCHEDULE_FORMAT_VERSION};
pub use search::{search_all, search_step, Optimizer, SearchConfig, SearchReport, StepReport, StepSearch};

/// Interpolation order used unless configured otherwise.
pub const DEFAULT_K: usize = 2;

/// Lagrange basis weights of `nodes` evaluated at `at`.
///
/// Generic over any numeric field, so exact rational types can be used to
/// check the kernel. When `at` coincides with a node the weights are exactly
/// one for that node and zero elsewhere.
pub fn lagrange_weights<T: Num + Copy>(nodes: &[T], at: T) -> Vec<T> {
    (0..nodes.len())
        .map(|k| {
            let mut w = T::one();
            for (l, &tl) in nodes.iter().enumerate() {
                if l != k {
                    w = w * ((at - tl) / (nodes[k] - tl));
                }
            }
            w
        })
        .collect()
}

/// `t' = rho t_i + (1 - rho) t_(i-1)`.
pub fn compensation_time<T: Scalar>(t_i: T, t_prev: T, rho: T) -> T {
    if rho == T::one() {
        t_i
    } else if rho == T::zero() {
        t_prev
    } else {
        rho * t_i + (T::one() - rho) * t_prev
    }
}

/// Estimates the newest buffered output at the compensated time.
///
/// Needs `k + 1` entries: the newest at `t_i` and `k` older ones. The result
/// keeps the time label `t_i` and the buffer's parameterization.
pub fn lagrange_compensate<T: Scalar>(buffer: &Buffer<T>, rho: T, k: usize) -> Result<ModelOutput<T>> {
    if k == 0 {
        return Err(Error::Config("compensation order K must be at least 1".into()));
    }
    if buffer.len() < k + 1 {
        return Err(Error::WarmUp {
            needed: k + 1,
            available: buffer.len(),
        });
    }
    if !rho.is_finite() {
        return Err(Error::Numerical(format!("non-finite compensation ratio {rho}")));
    }
    let newest = buffer.newest().unwrap();
    let t_prime = compensation_time(newest.t, buffer.back(1).unwrap().t, rho);
    let nodes: Vec<&ModelOutput<T>> = (0..=k).map(|j| buffer.back(j).unwrap()).collect();
    let times: Vec<T> = nodes.iter().map(|n| n.t).collect();

    if let Some(hit) = nodes.iter().find(|n| n.t == t_prime) {
        return Ok(ModelOutput::new(newest.param, hit.value.clone(), newest.t));
    }
    let weights = lagrange_weights(&times, t_prime);
    let mut value = vec![T::zero(); newest.value.len()];
    for (w, node) in weights.iter().zip(&nodes) {
        for (v, &n) in value.iter_mut().zip(&node.value) {
            *v = *v + *w * n;
        }
    }
    Ok(ModelOutput::new(newest.param, value, newest.t))
}

/// Copy of `buffer` with its newest entry replaced by `compensated`.
pub fn swap_buffer<T: Scalar>(buffer: &Buffer<T>, compensated: ModelOutput<T>) -> Result<Buffer<T>> {
    buffer.with_newest_replaced(compensated)
}
