//! Ground-truth trajectories, error metrics and convergence slopes.

mod experiment;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::DenoisingModel;
use crate::scalar::{mean_sq_diff, Scalar};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::solver::{Sampler, SamplerConfig, Trajectory};

pub use experiment::{
    fit_cpr_by_search, run_experiment, search_schedule, CellReport, DcMode, ExperimentReport, SeedSplit,
    REPORT_FORMAT_VERSION,
};

/// Name of the generator behind [`initial_noise`], recorded in reports.
pub const NOISE_GENERATOR: &str = "chacha8";

/// Standard normal initial noise for one datapoint seed.
pub fn initial_noise<T: Scalar>(seed: u64, dim: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| T::lit(StandardNormal.sample(&mut rng)))
        .collect()
}

/// Fine grid holding every coarse time exactly: `gt_nfe` steps with the
/// coarse spacing, merged with the coarse times. Fine times that nearly
/// coincide with a coarse time are dropped in its favour.
pub fn union_grid<T: Scalar>(schedule: &NoiseSchedule<T>, coarse: &TimeGrid<T>, gt_nfe: usize) -> Result<TimeGrid<T>> {
    let fine = TimeGrid::new(schedule, gt_nfe, coarse.spacing())?;
    let tol = (schedule.t_start - schedule.t_end) * T::lit(1e-9);
    let coarse_times = coarse.timesteps();
    let mut times: Vec<T> = coarse_times.to_vec();
    times.extend(
        fine.timesteps()
            .iter()
            .copied()
            .filter(|&t| coarse_times.iter().all(|&c| (t - c).abs() > tol)),
    );
    times.sort_by(|a, b| b.partial_cmp(a).unwrap());
    TimeGrid::from_times(schedule, times, coarse.spacing())
}

/// Ground-truth states at every coarse time, from the first-order
/// data-prediction sampler on [`union_grid`].
pub fn ground_truth<T, M>(
    model: &M,
    cond: Option<u32>,
    x_init: &[T],
    schedule: &NoiseSchedule<T>,
    coarse: &TimeGrid<T>,
    gt_nfe: usize,
) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    M: DenoisingModel<T> + ?Sized,
{
    let grid = union_grid(schedule, coarse, gt_nfe)?;
    let cfg = SamplerConfig::data_pred(1, false, grid, *schedule)?;
    let traj = Sampler::new(model, &cfg).with_condition(cond).sample(x_init, None)?;
    let mut out = Vec::with_capacity(coarse.steps() + 1);
    let mut j = 0;
    for &t in coarse.timesteps() {
        while traj.times[j] != t {
            j += 1;
        }
        out.push(traj.states[j].clone());
    }
    Ok(out)
}

/// [`ground_truth`] for many initial states, in parallel.
pub fn ground_truth_batch<T, M>(
    model: &M,
    cond: Option<u32>,
    x_inits: &[Vec<T>],
    schedule: &NoiseSchedule<T>,
    coarse: &TimeGrid<T>,
    gt_nfe: usize,
) -> Result<Vec<Vec<Vec<T>>>>
where
    T: Scalar,
    M: DenoisingModel<T> + ?Sized,
{
    x_inits
        .par_iter()
        .map(|x| ground_truth(model, cond, x, schedule, coarse, gt_nfe))
        .collect()
}

/// Mean over datapoints and dimensions of the squared endpoint error.
pub fn mse_to_gt<T: Scalar>(endpoints: &[&[T]], gt_endpoints: &[&[T]]) -> Result<T> {
    if endpoints.is_empty() || endpoints.len() != gt_endpoints.len() {
        return Err(Error::Contract(format!(
            "{} endpoints against {} ground-truth endpoints",
            endpoints.len(),
            gt_endpoints.len()
        )));
    }
    let mut total = T::zero();
    for (e, g) in endpoints.iter().zip(gt_endpoints) {
        if e.len() != g.len() {
            return Err(Error::Contract(format!(
                "endpoint dim {} against ground-truth dim {}",
                e.len(),
                g.len()
            )));
        }
        total = total + mean_sq_diff(e, g);
    }
    Ok(total / T::from_usize(endpoints.len()).unwrap())
}

/// [`mse_to_gt`] for sampled trajectories against full ground-truth runs.
pub fn trajectory_mse<T: Scalar>(trajs: &[Trajectory<T>], gt: &[Vec<Vec<T>>]) -> Result<T> {
    let ends: Vec<&[T]> = trajs.iter().map(|t| t.endpoint()).collect();
    let gts: Vec<&[T]> = gt.iter().map(|g| g.last().map(|v| v.as_slice()).unwrap_or(&[])).collect();
    mse_to_gt(&ends, &gts)
}

/// Least-squares slope of `ln(error)` against `ln(1 / nfe)`.
pub fn order_slope(errors: &[f64], nfes: &[usize]) -> Result<f64> {
    if errors.len() != nfes.len() || errors.len() < 3 {
        return Err(Error::Contract("order slope needs at least 3 (nfe, error) pairs".into()));
    }
    if let Some(e) = errors.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::Contract(format!("errors must be positive and finite, got {e}")));
    }
    if nfes.contains(&0) {
        return Err(Error::Contract("nfe must be positive".into()));
    }
    let xs: Vec<f64> = nfes.iter().map(|&n| -(n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("nfe values must not all be equal".into()));
    }
    Ok(sxy / sxx)
}

/// Root-mean-square endpoint error against exact reference endpoints for
/// each NFE, averaged over the initial states.
pub fn endpoint_errors<T, M>(
    model: &M,
    cond: Option<u32>,
    make_config: impl Fn(usize) -> Result<SamplerConfig<T>> + Sync,
    nfes: &[usize],
    x_inits: &[Vec<T>],
    reference: &[Vec<T>],
) -> Result<Vec<f64>>
where
    T: Scalar,
    M: DenoisingModel<T> + ?Sized,
{
    nfes.par_iter()
        .map(|&nfe| {
            let cfg = make_config(nfe)?;
            let sampler = Sampler::new(model, &cfg).with_condition(cond);
            let trajs = x_inits
                .iter()
                .map(|x| sampler.sample(x, None))
                .collect::<Result<Vec<_>>>()?;
            let ends: Vec<&[T]> = trajs.iter().map(|t| t.endpoint()).collect();
            let refs: Vec<&[T]> = reference.iter().map(|r| r.as_slice()).collect();
            Ok(mse_to_gt(&ends, &refs)?.to_f64_lossy().sqrt())
        })
        .collect()
}
