//! Exponential-integrator multistep predictor and predictor-corrector
//! samplers for the diffusion probability-flow ODE.

mod buffer;
mod integrals;
mod trajectory;

use crate::dc::{lagrange_compensate, CompensationSchedule};
use crate::error::{Error, Result};
use crate::model::{convert, DenoisingModel, ModelOutput, Parameterization};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, TimeGrid};

pub use buffer::Buffer;
pub use integrals::{exp_integrals, step_coefficients, StepCoefficients};
pub use trajectory::Trajectory;

pub const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig<T> {
    pub order: usize,
    pub use_corrector: bool,
    pub param: Parameterization,
    pub grid: TimeGrid<T>,
    pub schedule: NoiseSchedule<T>,
}

impl<T: Scalar> SamplerConfig<T> {
    pub fn new(
        order: usize,
        use_corrector: bool,
        param: Parameterization,
        grid: TimeGrid<T>,
        schedule: NoiseSchedule<T>,
    ) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(Error::Config(format!("sampler order must be in 1..=3, got {order}")));
        }
        if param == Parameterization::VPred {
            return Err(Error::Config("working parameterization must be data_pred or noise_pred".into()));
        }
        if grid.time(0) != schedule.t_start || grid.time(grid.steps()) != schedule.t_end {
            return Err(Error::Config("grid endpoints do not match the schedule".into()));
        }
        Ok(SamplerConfig {
            order,
            use_corrector,
            param,
            grid,
            schedule,
        })
    }

    /// Data-prediction sampler, the usual default.
    pub fn data_pred(order: usize, use_corrector: bool, grid: TimeGrid<T>, schedule: NoiseSchedule<T>) -> Result<Self> {
        Self::new(order, use_corrector, Parameterization::DataPred, grid, schedule)
    }

    pub fn nfe(&self) -> usize {
        self.grid.steps()
    }

    /// Buffer capacity for interpolation order `k` of the compensation.
    pub fn buffer_capacity(&self, k: usize) -> usize {
        self.order.max(k + 1)
    }
}

fn apply<T: Scalar>(coef: &StepCoefficients<T>, x: &[T], values: &[&[T]]) -> Vec<T> {
    let mut out: Vec<T> = x.iter().map(|&xi| coef.a * xi).collect();
    for (&b, v) in coef.b.iter().zip(values) {
        for (o, &vi) in out.iter_mut().zip(v.iter()) {
            *o = *o + b * vi;
        }
    }
    out
}

fn newest_nodes<'b, T: Scalar>(
    buffer: &'b Buffer<T>,
    order: usize,
    param: Parameterization,
) -> Result<(Vec<T>, Vec<&'b [T]>)> {
    if order == 0 || buffer.len() < order {
        return Err(Error::WarmUp {
            needed: order.max(1),
            available: buffer.len(),
        });
    }
    let mut times = Vec::with_capacity(order + 1);
    let mut values = Vec::with_capacity(order + 1);
    for k in 0..order {
        let e = buffer.back(k).unwrap();
        if e.param != param {
            return Err(Error::Contract(format!(
                "buffer holds {:?} outputs, sampler works in {:?}",
                e.param, param
            )));
        }
        times.push(e.t);
        values.push(e.value.as_slice());
    }
    Ok((times, values))
}

/// Multistep predictor from `t_(i-1)` to `t_i` using the `order` newest
/// buffered outputs.
pub fn predictor_step<T: Scalar>(
    x_prev: &[T],
    buffer: &Buffer<T>,
    i: usize,
    order: usize,
    cfg: &SamplerConfig<T>,
) -> Result<Vec<T>> {
    let (t_prev, t_i) = step_times(cfg, i)?;
    let (times, values) = newest_nodes(buffer, order, cfg.param)?;
    if times[0] != t_prev {
        return Err(Error::Contract(format!(
            "newest buffered output is at t={}, predictor starts at t={t_prev}",
            times[0]
        )));
    }
    let coef = step_coefficients(&cfg.schedule, t_prev, t_i, &times, cfg.param)?;
    Ok(apply(&coef, x_prev, &values))
}

/// Corrector for the step `t_(i-1) -> t_i`: recomputes the step from
/// `x_prev` with the model output at the predicted point added as a node.
pub fn corrector_step<T: Scalar>(
    x_prev: &[T],
    new_output: &ModelOutput<T>,
    buffer: &Buffer<T>,
    i: usize,
    order: usize,
    cfg: &SamplerConfig<T>,
) -> Result<Vec<T>> {
    let (t_prev, t_i) = step_times(cfg, i)?;
    if new_output.t != t_i {
        return Err(Error::Contract(format!(
            "corrector output at t={} but step ends at t={t_i}",
            new_output.t
        )));
    }
    if new_output.param != cfg.param {
        return Err(Error::Contract("corrector output in the wrong parameterization".into()));
    }
    let (mut times, mut values) = newest_nodes(buffer, order, cfg.param)?;
    if times[0] != t_prev {
        return Err(Error::Contract("corrector buffer is not aligned with the step start".into()));
    }
    if times.contains(&new_output.t) {
        return Err(Error::Contract("corrector node duplicates a buffered time".into()));
    }
    times.insert(0, new_output.t);
    values.insert(0, new_output.value.as_slice());
    let coef = step_coefficients(&cfg.schedule, t_prev, t_i, &times, cfg.param)?;
    Ok(apply(&coef, x_prev, &values))
}

fn step_times<T: Scalar>(cfg: &SamplerConfig<T>, i: usize) -> Result<(T, T)> {
    if i == 0 || i > cfg.grid.steps() {
        return Err(Error::Contract(format!(
            "step index {i} outside 1..={}",
            cfg.grid.steps()
        )));
    }
    Ok((cfg.grid.time(i - 1), cfg.grid.time(i)))
}

/// Corrected state at grid index `index` together with the output buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState<T> {
    pub index: usize,
    pub x: Vec<T>,
    pub buffer: Buffer<T>,
}

/// Result of advancing one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub predicted: Vec<T>,
    pub state: SamplerState<T>,
}

/// Drives a model through the predictor(-corrector) recursion.
///
/// Each step `t_i -> t_(i+1)` predicts from the buffer, evaluates the model
/// once at the predicted point, corrects with that output and pushes it.
/// The final step skips the evaluation, so a grid of `M` steps costs exactly
/// `M` evaluations.
pub struct Sampler<'a, T, M: ?Sized> {
    model: &'a M,
    config: &'a SamplerConfig<T>,
    cond: Option<u32>,
    compensation_order: usize,
}

impl<'a, T: Scalar, M: DenoisingModel<T> + ?Sized> Sampler<'a, T, M> {
    pub fn new(model: &'a M, config: &'a SamplerConfig<T>) -> Self {
        Sampler {
            model,
            config,
            cond: None,
            compensation_order: crate::dc::DEFAULT_K,
        }
    }

    /// Condition id forwarded to the model.
    pub fn with_condition(mut self, cond: Option<u32>) -> Self {
        self.cond = cond;
        self
    }

    /// Keeps enough history for compensation of order `k`.
    pub fn with_compensation_order(mut self, k: usize) -> Self {
        self.compensation_order = k;
        self
    }

    pub fn config(&self) -> &SamplerConfig<T> {
        self.config
    }

    fn evaluate(&self, x: &[T], t: T) -> Result<ModelOutput<T>> {
        if x.len() != self.model.dim() {
            return Err(Error::Contract(format!(
                "state has dim {}, model dim is {}",
                x.len(),
                self.model.dim()
            )));
        }
        let out = self.model.evaluate(x, t, self.cond)?;
        if out.value.len() != x.len() {
            return Err(Error::Contract("model returned the wrong dimension".into()));
        }
        if out.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite model output at t={t}")));
        }
        convert(&out, x, &self.config.schedule, self.config.param)
    }

    /// Evaluates the model at the initial noise and seeds the buffer.
    pub fn init(&self, x_init: &[T]) -> Result<SamplerState<T>> {
        let t0 = self.config.grid.time(0);
        let out = self.evaluate(x_init, t0).map_err(|e| e.at_step(0))?;
        let mut buffer = Buffer::new(self.config.buffer_capacity(self.compensation_order));
        buffer.push(out)?;
        Ok(SamplerState {
            index: 0,
            x: x_init.to_vec(),
            buffer,
        })
    }

    /// Advances `state` from `t_i` to `t_(i+1)`.
    pub fn step(&self, state: &SamplerState<T>) -> Result<StepOutcome<T>> {
        let target = state.index + 1;
        self.step_inner(state).map_err(|e| e.at_step(target))
    }

    fn step_inner(&self, state: &SamplerState<T>) -> Result<StepOutcome<T>> {
        let cfg = self.config;
        let target = state.index + 1;
        // warm-up at progressively lower orders
        let order = cfg.order.min(state.buffer.len());
        let predicted = predictor_step(&state.x, &state.buffer, target, order, cfg)?;
        let mut buffer = state.buffer.clone();
        let x = if target < cfg.nfe() {
            let out = self.evaluate(&predicted, cfg.grid.time(target))?;
            let corrected = if cfg.use_corrector {
                corrector_step(&state.x, &out, &state.buffer, target, order, cfg)?
            } else {
                predicted.clone()
            };
            buffer.push(out)?;
            corrected
        } else {
            predicted.clone()
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite state".into()));
        }
        Ok(StepOutcome {
            predicted,
            state: SamplerState {
                index: target,
                x,
                buffer,
            },
        })
    }

    /// Replaces the newest buffered output by its compensated estimate.
    pub fn compensate(&self, state: &SamplerState<T>, rho: T, k: usize) -> Result<SamplerState<T>> {
        let estimate = lagrange_compensate(&state.buffer, rho, k)?;
        Ok(SamplerState {
            index: state.index,
            x: state.x.clone(),
            buffer: crate::dc::swap_buffer(&state.buffer, estimate)?,
        })
    }

    /// Full sampling run. With a compensation schedule, the buffer is
    /// compensated before every step `i >= K`.
    pub fn sample(&self, x_init: &[T], dc: Option<&CompensationSchedule<T>>) -> Result<Trajectory<T>> {
        let m = self.config.nfe();
        if let Some(dc) = dc {
            if dc.rho.len() != m {
                return Err(Error::Config(format!(
                    "compensation schedule has {} ratios for {m} steps",
                    dc.rho.len()
                )));
            }
            if dc.k + 1 > self.config.buffer_capacity(self.compensation_order) {
                return Err(Error::Config(format!(
                    "compensation order {} exceeds buffer capacity",
                    dc.k
                )));
            }
        }
        let mut state = self.init(x_init)?;
        let mut traj = Trajectory::start(self.config.grid.timesteps().to_vec(), x_init.to_vec());
        traj.nfe_used = 1;
        for i in 0..m {
            if let Some(dc) = dc {
                if i >= dc.k {
                    state = self.compensate(&state, dc.rho[i], dc.k).map_err(|e| e.at_step(i))?;
                }
            }
            let outcome = self.step(&state)?;
            if outcome.state.index < m {
                traj.nfe_used += 1;
            }
            traj.push(outcome.predicted, outcome.state.x.clone());
            state = outcome.state;
        }
        Ok(traj)
    }
}
