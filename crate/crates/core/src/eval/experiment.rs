//! Experiment cells: sampler × NFE × guidance scale × compensation mode.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ground_truth_batch, initial_noise, order_slope, NOISE_GENERATOR};
use crate::config::{RunConfig, SamplerSpec};
use crate::cpr::{cpr_fit, CprCoefficients, CprFit};
use crate::dc::{search_all, CompensationSchedule, ScheduleMeta, SearchReport, StepReport};
use crate::error::{Error, Result};
use crate::scalar::mean_sq_diff;
use crate::solver::Sampler;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcMode {
    Off,
    Searched,
    Cpr,
}

impl DcMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DcMode::Off => "off",
            DcMode::Searched => "searched",
            DcMode::Cpr => "cpr",
        }
    }
}

/// Half-open seed ranges for search datapoints and held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSplit {
    pub search: [u64; 2],
    pub eval: [u64; 2],
}

impl SeedSplit {
    pub fn from_config(config: &RunConfig) -> Self {
        let e = config.eval.seed_start;
        SeedSplit {
            search: [0, config.dc.n as u64],
            eval: [e, e + config.eval.n_seeds as u64],
        }
    }

    pub fn search_noise(&self, dim: usize) -> Vec<Vec<f64>> {
        (self.search[0]..self.search[1]).map(|s| initial_noise(s, dim)).collect()
    }

    pub fn eval_noise(&self, dim: usize) -> Vec<Vec<f64>> {
        (self.eval[0]..self.eval[1]).map(|s| initial_noise(s, dim)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub sampler: String,
    pub order: usize,
    pub corrector: bool,
    pub nfe: usize,
    pub cfg: f64,
    pub dc_mode: DcMode,
    /// Mean over held-out seeds of the per-dimension endpoint MSE.
    pub mse: f64,
    pub per_seed_mse: Vec<f64>,
    /// Ratios used, absent for `off`.
    pub rho: Option<Vec<f64>>,
    /// Per-step search losses, present for `searched`.
    pub per_step_losses: Vec<StepReport>,
    /// Convergence slope of the RMS error across the experiment's NFEs.
    pub slope: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub noise_generator: String,
    pub seeds: SeedSplit,
    pub config: serde_json::Value,
    pub cells: Vec<CellReport>,
}

/// Searches a compensation schedule for one (sampler, NFE, guidance) cell on
/// the search seeds.
pub fn search_schedule(
    config: &RunConfig,
    spec: &SamplerSpec,
    nfe: usize,
    cfg_scale: f64,
) -> Result<(CompensationSchedule<f64>, SearchReport)> {
    let search = config.search_config()?;
    let model = config.build_model(cfg_scale)?;
    let sc = config.sampler_config(spec, nfe)?;
    let x_inits = SeedSplit::from_config(config).search_noise(config.dim());
    let gt = ground_truth_batch(&*model, None, &x_inits, &sc.schedule, &sc.grid, search.gt_nfe)?;
    let sampler = Sampler::new(&*model, &sc).with_compensation_order(search.k);
    search_all(&sampler, &x_inits, &gt, &search, cfg_scale)
}

/// Searches every configuration of the CPR training grid and fits the
/// regression to the resulting schedules.
pub fn fit_cpr_by_search(config: &RunConfig, spec: &SamplerSpec) -> Result<(CprFit<f64>, Vec<CompensationSchedule<f64>>)> {
    let cells: Vec<(f64, usize)> = config
        .cpr
        .train_cfg
        .iter()
        .flat_map(|&c| config.cpr.train_nfe.iter().map(move |&n| (c, n)))
        .collect();
    let schedules = cells
        .par_iter()
        .map(|&(c, n)| search_schedule(config, spec, n, c).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    let fit = cpr_fit(&schedules, config.cpr.degrees())?;
    Ok((fit, schedules))
}

struct Group {
    spec: SamplerSpec,
    nfe: usize,
    cfg: f64,
}

fn run_group(config: &RunConfig, g: &Group, cpr: Option<&CprCoefficients<f64>>) -> Result<Vec<CellReport>> {
    let gt_nfe = config.gt_nfe()?;
    let model = config.build_model(g.cfg)?;
    let sc = config.sampler_config(&g.spec, g.nfe)?;
    let k = config.dc.k;
    let sampler = Sampler::new(&*model, &sc).with_compensation_order(k);
    let x_eval = SeedSplit::from_config(config).eval_noise(config.dim());
    let gt = ground_truth_batch(&*model, None, &x_eval, &sc.schedule, &sc.grid, gt_nfe)?;

    let mut cells = Vec::new();
    for &mode in &config.eval.dc_modes {
        let clock = Instant::now();
        let (schedule, losses) = match mode {
            DcMode::Off => (None, Vec::new()),
            DcMode::Searched => {
                let (s, report) = search_schedule(config, &g.spec, g.nfe, g.cfg)?;
                (Some(s), report.steps)
            }
            DcMode::Cpr => {
                let coeffs = cpr.ok_or_else(|| Error::Config("cpr mode without coefficients".into()))?;
                let meta = ScheduleMeta::for_sampler(&sc, g.cfg);
                (Some(coeffs.predict_schedule(meta, k, config.dc.rho_min, config.dc.rho_max)?), Vec::new())
            }
        };
        let per_seed_mse = x_eval
            .par_iter()
            .zip(gt.par_iter())
            .map(|(x, gt)| {
                let traj = sampler.sample(x, schedule.as_ref())?;
                Ok(mean_sq_diff(traj.endpoint(), gt.last().unwrap()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mse = per_seed_mse.iter().sum::<f64>() / per_seed_mse.len() as f64;
        cells.push(CellReport {
            sampler: g.spec.name().to_string(),
            order: g.spec.order,
            corrector: g.spec.corrector,
            nfe: g.nfe,
            cfg: g.cfg,
            dc_mode: mode,
            mse,
            per_seed_mse,
            rho: schedule.map(|s| s.rho),
            per_step_losses: losses,
            slope: None,
            seconds: if config.eval.timing {
                clock.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(cells)
}

fn load_or_fit_cpr(config: &RunConfig, spec: &SamplerSpec) -> Result<CprCoefficients<f64>> {
    match &config.cpr.file {
        Some(path) => CprCoefficients::load(path),
        None => Ok(fit_cpr_by_search(config, spec)?.0.coefficients),
    }
}

/// Runs every cell of the configured experiment. Cells run concurrently and
/// are reported in configuration order.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentReport> {
    config.validate()?;
    config.gt_nfe()?;
    let specs = config.eval_samplers();
    let groups: Vec<Group> = specs
        .iter()
        .flat_map(|&spec| {
            config.eval_nfes().into_iter().flat_map(move |nfe| {
                config.eval_cfgs().into_iter().map(move |cfg| Group { spec, nfe, cfg })
            })
        })
        .collect();

    let cprs: Vec<Option<CprCoefficients<f64>>> = if config.eval.dc_modes.contains(&DcMode::Cpr) {
        specs
            .par_iter()
            .map(|s| load_or_fit_cpr(config, s).map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None; specs.len()]
    };

    let per_group = groups
        .par_iter()
        .map(|g| {
            let idx = specs.iter().position(|s| *s == g.spec).unwrap();
            run_group(config, g, cprs[idx].as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells: Vec<CellReport> = per_group.into_iter().flatten().collect();
    fill_slopes(&mut cells);

    Ok(ExperimentReport {
        version: REPORT_FORMAT_VERSION,
        noise_generator: NOISE_GENERATOR.to_string(),
        seeds: SeedSplit::from_config(config),
        config: config.to_json_value(),
        cells,
    })
}

fn fill_slopes(cells: &mut [CellReport]) {
    for i in 0..cells.len() {
        let key = |c: &CellReport| (c.order, c.corrector, c.cfg.to_bits(), c.dc_mode);
        let k = key(&cells[i]);
        let series: Vec<(usize, f64)> = cells.iter().filter(|c| key(c) == k).map(|c| (c.nfe, c.mse.sqrt())).collect();
        let nfes: Vec<usize> = series.iter().map(|s| s.0).collect();
        let errs: Vec<f64> = series.iter().map(|s| s.1).collect();
        cells[i].slope = order_slope(&errs, &nfes).ok();
    }
}

impl ExperimentReport {
    /// One row per cell: sampler, order, nfe, cfg, dc_mode, mse, slope, seconds.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sampler", "order", "nfe", "cfg", "dc_mode", "mse", "slope", "seconds"])
            .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                c.sampler.clone(),
                c.order.to_string(),
                c.nfe.to_string(),
                c.cfg.to_string(),
                c.dc_mode.as_str().to_string(),
                c.mse.to_string(),
                c.slope.map(|s| s.to_string()).unwrap_or_default(),
                c.seconds.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&csv_path, self.to_csv()?)?;
        std::fs::write(&json_path, self.to_json()?)?;
        Ok((csv_path, json_path))
    }

    pub fn cell(&self, order: usize, corrector: bool, nfe: usize, cfg: f64, mode: DcMode) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.order == order && c.corrector == corrector && c.nfe == nfe && c.cfg == cfg && c.dc_mode == mode)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}
