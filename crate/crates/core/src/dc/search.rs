//! Per-step search of compensation ratios against ground-truth states.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CompensationSchedule, ScheduleMeta};
use crate::error::{Error, Result};
use crate::model::DenoisingModel;
use crate::scalar::{mean_sq_diff, Scalar};
use crate::solver::{Sampler, SamplerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Adam on a central finite-difference gradient.
    #[default]
    AdamFd,
    GoldenSection,
    GridRefine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig<T> {
    pub n_datapoints: usize,
    pub iterations: usize,
    pub learning_rate: T,
    pub gt_nfe: usize,
    pub optimizer: Optimizer,
    /// Interpolation order of the compensation.
    pub k: usize,
    pub rho_min: T,
    pub rho_max: T,
    /// Half-width of the finite-difference stencil.
    pub fd_step: T,
}

impl<T: Scalar> Default for SearchConfig<T> {
    fn default() -> Self {
        SearchConfig {
            n_datapoints: 10,
            iterations: 40,
            learning_rate: T::lit(0.1),
            gt_nfe: 999,
            optimizer: Optimizer::AdamFd,
            k: super::DEFAULT_K,
            rho_min: T::zero(),
            rho_max: T::lit(2.0),
            fd_step: T::lit(1e-3),
        }
    }
}

impl<T: Scalar> SearchConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_datapoints == 0 {
            problems.push("n_datapoints must be >= 1".to_string());
        }
        if self.iterations == 0 {
            problems.push("iterations must be >= 1".to_string());
        }
        if !(self.learning_rate > T::zero()) {
            problems.push("learning rate must be positive".to_string());
        }
        if self.k == 0 {
            problems.push("K must be >= 1".to_string());
        }
        if !(self.rho_min < T::one() && self.rho_max > T::one()) {
            problems.push("search box must contain 1 in its interior".to_string());
        }
        if !(self.fd_step > T::zero()) {
            problems.push("fd_step must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn clamp(&self, rho: T) -> T {
        rho.max(self.rho_min).min(self.rho_max)
    }
}

/// Outcome of searching one step.
#[derive(Debug, Clone)]
pub struct StepSearch<T> {
    pub rho: T,
    pub loss_at_one: T,
    pub loss_at_best: T,
    pub evaluations: usize,
    /// Input states with the buffer compensated at `rho`.
    pub states: Vec<SamplerState<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub i: usize,
    pub rho: f64,
    pub loss_at_one: f64,
    pub loss_at_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub steps: Vec<StepReport>,
    /// Endpoint MSE on the search datapoints with `rho = 1` throughout.
    pub endpoint_mse_baseline: f64,
    /// Endpoint MSE on the search datapoints with the searched ratios.
    pub endpoint_mse_searched: f64,
}

/// Tracks the lowest loss seen so far.
struct Best<T> {
    rho: T,
    loss: T,
    evaluations: usize,
}

impl<T: Scalar> Best<T> {
    fn offer(&mut self, rho: T, loss: T) {
        self.evaluations += 1;
        if loss.is_finite() && loss < self.loss {
            self.rho = rho;
            self.loss = loss;
        }
    }
}

struct Objective<'s, 'a, T, M: ?Sized> {
    sampler: &'s Sampler<'a, T, M>,
    states: &'s [SamplerState<T>],
    gt_next: &'s [&'s [T]],
    k: usize,
}

impl<T: Scalar, M: DenoisingModel<T> + ?Sized> Objective<'_, '_, T, M> {
    /// Mean over datapoints of the per-dimension squared error after one
    /// compensated step.
    fn loss(&self, rho: T) -> Result<T> {
        let per_point: Vec<Result<T>> = self
            .states
            .par_iter()
            .zip(self.gt_next.par_iter())
            .map(|(s, gt)| {
                let swapped = self.sampler.compensate(s, rho, self.k)?;
                let next = self.sampler.step(&swapped)?;
                Ok(mean_sq_diff(&next.state.x, gt))
            })
            .collect();
        let mut total = T::zero();
        for r in per_point {
            match r {
                Ok(v) => total = total + v,
                // a diverging rollout just makes this ratio unattractive
                Err(e) if is_numerical(&e) => return Ok(T::infinity()),
                Err(e) => return Err(e),
            }
        }
        Ok(total / T::from_usize(self.states.len()).unwrap())
    }
}

fn is_numerical(e: &Error) -> bool {
    match e {
        Error::Numerical(_) => true,
        Error::Step { source, .. } => is_numerical(source),
        _ => false,
    }
}

/// Finds the ratio for the step leaving `states` (all at the same grid
/// index `i >= K`) that minimizes the mean squared distance to `gt_next`
/// after one step. The returned loss never exceeds the loss at `rho = 1`.
pub fn search_step<T, M>(
    sampler: &Sampler<'_, T, M>,
    states: &[SamplerState<T>],
    gt_next: &[&[T]],
    cfg: &SearchConfig<T>,
) -> Result<StepSearch<T>>
where
    T: Scalar,
    M: DenoisingModel<T> + ?Sized,
{
    cfg.validate()?;
    if states.is_empty() || states.len() != gt_next.len() {
        return Err(Error::Contract(format!(
            "{} states but {} ground-truth targets",
            states.len(),
            gt_next.len()
        )));
    }
    let index = states[0].index;
    if states.iter().any(|s| s.index != index) {
        return Err(Error::Contract("all search states must share a grid index".into()));
    }
    if index < cfg.k {
        return Err(Error::WarmUp {
            needed: cfg.k + 1,
            available: index + 1,
        });
    }
    let obj = Objective {
        sampler,
        states,
        gt_next,
        k: cfg.k,
    };
    let loss_at_one = obj.loss(T::one())?;
    if !loss_at_one.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss at rho = 1 (step {index})")));
    }
    let mut best = Best {
        rho: T::one(),
        loss: loss_at_one,
        evaluations: 1,
    };
    match cfg.optimizer {
        Optimizer::AdamFd => adam_fd(&obj, cfg, &mut best)?,
        Optimizer::GoldenSection => golden_section(&obj, cfg, &mut best)?,
        Optimizer::GridRefine => grid_refine(&obj, cfg, &mut best)?,
    }
    let states = states
        .iter()
        .map(|s| sampler.compensate(s, best.rho, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepSearch {
        rho: best.rho,
        loss_at_one,
        loss_at_best: best.loss,
        evaluations: best.evaluations,
        states,
    })
}

fn adam_fd<T: Scalar, M: DenoisingModel<T> + ?Sized>(
    obj: &Objective<'_, '_, T, M>,
    cfg: &SearchConfig<T>,
    best: &mut Best<T>,
) -> Result<()> {
    let (beta1, beta2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
    let (mut m, mut v) = (T::zero(), T::zero());
    let (mut p1, mut p2) = (T::one(), T::one());
    let mut rho = T::one();
    for _ in 0..cfg.iterations {
        let (hi, lo) = (cfg.clamp(rho + cfg.fd_step), cfg.clamp(rho - cfg.fd_step));
        let (l_hi, l_lo) = (obj.loss(hi)?, obj.loss(lo)?);
        best.offer(hi, l_hi);
        best.offer(lo, l_lo);
        let g = (l_hi - l_lo) / (hi - lo);
        if !g.is_finite() {
            // divergence: keep the best ratio seen so far
            break;
        }
        m = beta1 * m + (T::one() - beta1) * g;
        v = beta2 * v + (T::one() - beta2) * g * g;
        p1 = p1 * beta1;
        p2 = p2 * beta2;
        let m_hat = m / (T::one() - p1);
        let v_hat = v / (T::one() - p2);
        rho = cfg.clamp(rho - cfg.learning_rate * m_hat / (v_hat.sqrt() + eps));
        let l = obj.loss(rho)?;
        best.offer(rho, l);
    }
    Ok(())
}

fn golden_section<T: Scalar, M: DenoisingModel<T> + ?Sized>(
    obj: &Objective<'_, '_, T, M>,
    cfg: &SearchConfig<T>,
    best: &mut Best<T>,
) -> Result<()> {
    let inv_phi = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let (mut a, mut b) = (cfg.rho_min, cfg.rho_max);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = obj.loss(c)?;
    let mut fd = obj.loss(d)?;
    best.offer(c, fc);
    best.offer(d, fd);
    for _ in 0..cfg.iterations {
        if fc < fd || (fd.is_nan() && !fc.is_nan()) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = obj.loss(c)?;
            best.offer(c, fc);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = obj.loss(d)?;
            best.offer(d, fd);
        }
    }
    Ok(())
}

fn grid_refine<T: Scalar, M: DenoisingModel<T> + ?Sized>(
    obj: &Objective<'_, '_, T, M>,
    cfg: &SearchConfig<T>,
    best: &mut Best<T>,
) -> Result<()> {
    const POINTS: usize = 9;
    let mut half = (cfg.rho_max - cfg.rho_min) / T::lit(2.0);
    let mut center = (cfg.rho_max + cfg.rho_min) / T::lit(2.0);
    for _ in 0..cfg.iterations {
        for j in 0..POINTS {
            let f = T::from_usize(j).unwrap() / T::from_usize(POINTS - 1).unwrap();
            let rho = cfg.clamp(center - half + f * (half + half));
            best.offer(rho, obj.loss(rho)?);
        }
        center = best.rho;
        half = half / T::lit(4.0);
        if half < T::epsilon() {
            break;
        }
    }
    Ok(())
}

/// Searches every step `i >= K` in order, carrying the compensated buffers
/// forward. `gt[n]` holds datapoint `n`'s ground-truth states at all grid
/// times.
pub fn search_all<T, M>(
    sampler: &Sampler<'_, T, M>,
    x_inits: &[Vec<T>],
    gt: &[Vec<Vec<T>>],
    cfg: &SearchConfig<T>,
    cfg_scale: f64,
) -> Result<(CompensationSchedule<T>, SearchReport)>
where
    T: Scalar,
    M: DenoisingModel<T> + ?Sized,
{
    cfg.validate()?;
    let m = sampler.config().nfe();
    if x_inits.is_empty() || x_inits.len() != gt.len() {
        return Err(Error::Contract("one ground-truth trajectory per datapoint required".into()));
    }
    if gt.iter().any(|g| g.len() != m + 1) {
        return Err(Error::Contract(format!("ground truth must have {} states", m + 1)));
    }
    if cfg.k >= m {
        return Err(Error::Config(format!("K={} leaves nothing to search for nfe {m}", cfg.k)));
    }

    let mut states = x_inits
        .par_iter()
        .map(|x| sampler.init(x))
        .collect::<Result<Vec<_>>>()?;
    let mut rho = vec![T::one(); m];
    let mut steps = Vec::new();
    for i in 0..m {
        if i >= cfg.k {
            let targets: Vec<&[T]> = gt.iter().map(|g| g[i + 1].as_slice()).collect();
            let found = search_step(sampler, &states, &targets, cfg).map_err(|e| e.at_step(i))?;
            rho[i] = found.rho;
            steps.push(StepReport {
                i,
                rho: found.rho.to_f64_lossy(),
                loss_at_one: found.loss_at_one.to_f64_lossy(),
                loss_at_best: found.loss_at_best.to_f64_lossy(),
            });
            states = found.states;
        }
        states = states
            .par_iter()
            .map(|s| sampler.step(s).map(|o| o.state))
            .collect::<Result<Vec<_>>>()?;
    }

    let meta = ScheduleMeta::for_sampler(sampler.config(), cfg_scale);
    let schedule = CompensationSchedule::new(rho, cfg.k, meta)?;
    let endpoint_mse_searched = mean_endpoint_mse(states.iter().map(|s| s.x.as_slice()), gt);
    let baseline = x_inits
        .par_iter()
        .map(|x| sampler.sample(x, None))
        .collect::<Result<Vec<_>>>()?;
    let endpoint_mse_baseline = mean_endpoint_mse(baseline.iter().map(|t| t.endpoint()), gt);
    Ok((
        schedule,
        SearchReport {
            steps,
            endpoint_mse_baseline: endpoint_mse_baseline.to_f64_lossy(),
            endpoint_mse_searched: endpoint_mse_searched.to_f64_lossy(),
        },
    ))
}

fn mean_endpoint_mse<'x, T: Scalar>(ends: impl Iterator<Item = &'x [T]>, gt: &[Vec<Vec<T>>]) -> T {
    let mut total = T::zero();
    for (e, g) in ends.zip(gt) {
        total = total + mean_sq_diff(e, g.last().unwrap());
    }
    total / T::from_usize(gt.len()).unwrap()
}
