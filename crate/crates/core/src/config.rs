//! Run configuration shared by the command-line tool and the experiment
//! driver.
//!
//! Configs are TOML files. Unknown keys are rejected and the whole config is
//! validated at once, so every problem is reported before any model call.
//! Dotted overrides such as `dc.lr=0.05` are applied to the parsed document
//! before it is deserialized.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cpr::Degrees;
use crate::dc::{Optimizer, SearchConfig};
use crate::error::{Error, Result};
use crate::eval::DcMode;
use crate::model::{DenoisingModel, GaussianMixture, GuidedModel, Parameterization, RemoteDenoiser};
use crate::schedule::{NoiseSchedule, ScheduleKind, Spacing, TimeGrid, DEFAULT_COSINE_T_START, DEFAULT_T_END};
use crate::solver::{SamplerConfig, MAX_ORDER};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    #[default]
    VpLinear,
    VpCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleName,
    pub beta_0: f64,
    pub beta_1: f64,
    /// Defaults to 1 for `vp_linear` and 0.9946 for `vp_cosine`.
    pub t_start: Option<f64>,
    pub t_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleName::VpLinear,
            beta_0: 0.1,
            beta_1: 20.0,
            t_start: None,
            t_end: DEFAULT_T_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule<f64>> {
        let (kind, t_start) = match self.kind {
            ScheduleName::VpLinear => (
                ScheduleKind::VpLinear {
                    beta_0: self.beta_0,
                    beta_1: self.beta_1,
                },
                self.t_start.unwrap_or(1.0),
            ),
            ScheduleName::VpCosine => (ScheduleKind::VpCosine, self.t_start.unwrap_or(DEFAULT_COSINE_T_START)),
        };
        NoiseSchedule::new(kind, t_start, self.t_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub nfe: usize,
    pub spacing: Spacing,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nfe: 10,
            spacing: Spacing::UniformT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Gmm,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Component means of the analytic mixture.
    pub means: Vec<Vec<f64>>,
    /// Mixture weights; uniform when omitted.
    pub weights: Option<Vec<f64>>,
    /// Common component standard deviation.
    pub scale: f64,
    /// `host:port` of a remote denoiser.
    pub address: Option<String>,
    /// Dimension served by the remote denoiser.
    pub dim: Option<usize>,
    /// Parameterization requested from the remote denoiser.
    pub param: Parameterization,
    /// Class condition. Guidance is applied only when a condition is set.
    pub cond: Option<u32>,
    pub cfg_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Gmm,
            means: vec![vec![1.0, 1.0], vec![-1.0, 0.5], vec![0.0, -1.2]],
            weights: None,
            scale: 0.2,
            address: None,
            dim: None,
            param: Parameterization::NoisePred,
            cond: None,
            cfg_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub order: usize,
    pub corrector: bool,
    pub param: Parameterization,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            order: 2,
            corrector: true,
            param: Parameterization::DataPred,
        }
    }
}

impl SamplerSpec {
    /// Row label used in experiment tables.
    pub fn name(&self) -> &'static str {
        if self.corrector {
            "predictor_corrector"
        } else {
            "predictor"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub optimizer: Optimizer,
    /// Number of search datapoints; their seeds are `0..n`.
    pub n: usize,
    /// Optimizer iterations per step.
    pub iterations: usize,
    pub lr: f64,
    pub fd_step: f64,
}

impl Default for DcSpec {
    fn default() -> Self {
        let d = SearchConfig::<f64>::default();
        DcSpec {
            k: d.k,
            rho_min: d.rho_min,
            rho_max: d.rho_max,
            optimizer: d.optimizer,
            n: d.n_datapoints,
            iterations: d.iterations,
            lr: d.learning_rate,
            fd_step: d.fd_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CprSpec {
    /// `[p1, p2, p3]`: degrees in NFE, CFG and step index.
    pub degrees: [usize; 3],
    pub train_cfg: Vec<f64>,
    pub train_nfe: Vec<usize>,
    /// Pre-fitted coefficients; when absent, the experiment fits them.
    pub file: Option<PathBuf>,
}

impl Default for CprSpec {
    fn default() -> Self {
        CprSpec {
            degrees: [2, 2, 4],
            train_cfg: vec![1.5, 4.5, 7.5, 10.5],
            train_nfe: vec![10, 15, 20],
            file: None,
        }
    }
}

impl CprSpec {
    pub fn degrees(&self) -> Degrees {
        Degrees::new(self.degrees[0], self.degrees[1], self.degrees[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Steps of the fine ground-truth grid. Required by `search` and `eval`.
    pub gt_nfe: Option<usize>,
    /// First held-out evaluation seed.
    pub seed_start: u64,
    pub n_seeds: usize,
    /// Experiment NFEs; defaults to `[grid.nfe]`.
    pub nfes: Vec<usize>,
    /// Experiment guidance scales; defaults to `[model.cfg_scale]`.
    pub cfgs: Vec<f64>,
    /// Experiment samplers; defaults to `[sampler]`.
    pub samplers: Vec<SamplerSpec>,
    pub dc_modes: Vec<DcMode>,
    /// Record wall time per cell. Off by default so tables are reproducible.
    pub timing: bool,
    /// NFEs of the convergence sweep.
    pub order_nfes: Vec<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            gt_nfe: None,
            seed_start: 1000,
            n_seeds: 50,
            nfes: Vec::new(),
            cfgs: Vec::new(),
            samplers: Vec::new(),
            dc_modes: vec![DcMode::Off, DcMode::Searched],
            timing: false,
            order_nfes: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleSpec,
    pub grid: GridSpec,
    pub model: ModelSpec,
    pub sampler: SamplerSpec,
    pub dc: DcSpec,
    pub cpr: CprSpec,
    pub eval: EvalSpec,
    pub output: OutputSpec,
}

/// Parses a `key=value` or bare value string as a TOML value, falling back
/// to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{path}'")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': '{p}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `(dotted.key, value)` overrides and
    /// validates the result.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut doc, k, parse_value(v))?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolved config embedded in output files.
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["format_version"] = CONFIG_FORMAT_VERSION.into();
        v["crate_version"] = env!("CARGO_PKG_VERSION").into();
        v
    }

    pub fn eval_nfes(&self) -> Vec<usize> {
        if self.eval.nfes.is_empty() {
            vec![self.grid.nfe]
        } else {
            self.eval.nfes.clone()
        }
    }

    pub fn eval_cfgs(&self) -> Vec<f64> {
        if self.eval.cfgs.is_empty() {
            vec![self.model.cfg_scale]
        } else {
            self.eval.cfgs.clone()
        }
    }

    pub fn eval_samplers(&self) -> Vec<SamplerSpec> {
        if self.eval.samplers.is_empty() {
            vec![self.sampler]
        } else {
            self.eval.samplers.clone()
        }
    }

    /// Checks the whole config and reports every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut p: Vec<String> = Vec::new();
        if let Err(e) = self.schedule.build() {
            p.push(format!("schedule: {e}"));
        }
        if self.grid.nfe < 2 {
            p.push(format!("grid.nfe must be >= 2, got {}", self.grid.nfe));
        }
        let m = &self.model;
        match m.kind {
            ModelKind::Gmm => {
                if m.means.is_empty() {
                    p.push("model.means must not be empty".into());
                }
                if let Some(d) = m.means.first().map(|v| v.len()) {
                    if d == 0 || m.means.iter().any(|v| v.len() != d) {
                        p.push("model.means must share one positive dimension".into());
                    }
                }
                if let Some(w) = &m.weights {
                    if w.len() != m.means.len() {
                        p.push(format!("model.weights has {} entries for {} means", w.len(), m.means.len()));
                    }
                }
                if !(m.scale > 0.0) {
                    p.push("model.scale must be positive".into());
                }
                if let Some(c) = m.cond {
                    if c as usize >= m.means.len() {
                        p.push(format!("model.cond {c} exceeds the {} components", m.means.len()));
                    }
                }
            }
            ModelKind::Remote => {
                if m.address.is_none() {
                    p.push("model.address is required for a remote model".into());
                }
                if m.dim.is_none_or(|d| d == 0) {
                    p.push("model.dim is required for a remote model".into());
                }
            }
        }
        let cfgs = self.eval_cfgs();
        if m.cond.is_none() && cfgs.iter().chain(std::iter::once(&m.cfg_scale)).any(|&s| s != 1.0) {
            p.push("guidance scales other than 1 need model.cond".into());
        }
        if cfgs.iter().any(|s| !s.is_finite()) {
            p.push("guidance scales must be finite".into());
        }
        for (name, s) in std::iter::once(("sampler", &self.sampler)).chain(self.eval.samplers.iter().map(|s| ("eval.samplers", s))) {
            if !(1..=MAX_ORDER).contains(&s.order) {
                p.push(format!("{name}.order must be in 1..={MAX_ORDER}, got {}", s.order));
            }
            if s.param == Parameterization::VPred {
                p.push(format!("{name}.param must be data_pred or noise_pred"));
            }
        }
        let d = &self.dc;
        if d.k == 0 {
            p.push("dc.K must be >= 1".into());
        }
        if !(d.rho_min < 1.0 && d.rho_max > 1.0) {
            p.push("dc search box must contain 1 in its interior".into());
        }
        if d.n == 0 {
            p.push("dc.n must be >= 1".into());
        }
        if d.iterations == 0 {
            p.push("dc.iterations must be >= 1".into());
        }
        if !(d.lr > 0.0) {
            p.push("dc.lr must be positive".into());
        }
        if !(d.fd_step > 0.0) {
            p.push("dc.fd_step must be positive".into());
        }
        for &nfe in self.eval_nfes().iter().chain(std::iter::once(&self.grid.nfe)) {
            if nfe <= d.k {
                p.push(format!("nfe {nfe} leaves no step to compensate with K={}", d.k));
            }
        }
        if self.eval.n_seeds == 0 {
            p.push("eval seed list is empty (eval.n_seeds = 0)".into());
        }
        if self.eval.seed_start < d.n as u64 {
            p.push(format!(
                "evaluation seeds start at {} and overlap the search seeds 0..{}",
                self.eval.seed_start, d.n
            ));
        }
        if let Some(g) = self.eval.gt_nfe {
            if g < 2 {
                p.push("eval.gt_nfe must be >= 2".into());
            }
        }
        if self.eval.dc_modes.is_empty() {
            p.push("eval.dc_modes must not be empty".into());
        }
        if self.eval.nfes.contains(&0) || self.eval.order_nfes.iter().any(|&n| n < 2) {
            p.push("every NFE must be >= 2".into());
        }
        if self.cpr.train_nfe.iter().any(|&n| n <= d.k) {
            p.push("cpr.train_nfe entries must exceed dc.K".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("\n")))
        }
    }

    /// `eval.gt_nfe`, which commands that need ground truth must have.
    pub fn gt_nfe(&self) -> Result<usize> {
        self.eval
            .gt_nfe
            .ok_or_else(|| Error::Config("eval.gt_nfe is required for ground-truth trajectories".into()))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule<f64>> {
        self.schedule.build()
    }

    pub fn dim(&self) -> usize {
        match self.model.kind {
            ModelKind::Gmm => self.model.means.first().map_or(0, |m| m.len()),
            ModelKind::Remote => self.model.dim.unwrap_or(0),
        }
    }

    pub fn sampler_config(&self, spec: &SamplerSpec, nfe: usize) -> Result<SamplerConfig<f64>> {
        let schedule = self.noise_schedule()?;
        let grid = TimeGrid::new(&schedule, nfe, self.grid.spacing)?;
        SamplerConfig::new(spec.order, spec.corrector, spec.param, grid, schedule)
    }

    pub fn search_config(&self) -> Result<SearchConfig<f64>> {
        let d = &self.dc;
        Ok(SearchConfig {
            n_datapoints: d.n,
            iterations: d.iterations,
            learning_rate: d.lr,
            gt_nfe: self.gt_nfe()?,
            optimizer: d.optimizer,
            k: d.k,
            rho_min: d.rho_min,
            rho_max: d.rho_max,
            fd_step: d.fd_step,
        })
    }

    /// The analytic mixture, when the config describes one.
    pub fn mixture(&self) -> Result<GaussianMixture<f64>> {
        let m = &self.model;
        if m.kind != ModelKind::Gmm {
            return Err(Error::Config("model is not an analytic mixture".into()));
        }
        let weights = m
            .weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / m.means.len() as f64; m.means.len()]);
        GaussianMixture::new(m.means.clone(), weights, m.scale, self.noise_schedule()?)
    }

    fn base_model(&self) -> Result<Box<dyn DenoisingModel<f64>>> {
        let m = &self.model;
        Ok(match m.kind {
            ModelKind::Gmm => Box::new(self.mixture()?),
            ModelKind::Remote => {
                let addr = m.address.as_deref().unwrap_or_default();
                Box::new(RemoteDenoiser::connect(addr, self.dim(), m.param)?)
            }
        })
    }

    /// The denoiser used for sampling at guidance scale `cfg_scale`.
    /// Guidance wraps the base model only when a condition is configured.
    pub fn build_model(&self, cfg_scale: f64) -> Result<Box<dyn DenoisingModel<f64>>> {
        let base = self.base_model()?;
        Ok(match self.model.cond {
            Some(c) => Box::new(GuidedModel::new(base, c, cfg_scale, self.noise_schedule()?)),
            None => base,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c.dc.k, 2);
        assert_eq!(c.dc.iterations, 40);
        assert_eq!(c.cpr.degrees, [2, 2, 4]);
        assert!(c.gt_nfe().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[dc]\nlearning_rate = 0.1\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let o = vec![
            ("dc.lr".to_string(), "0.05".to_string()),
            ("grid.spacing".to_string(), "uniform_logsnr".to_string()),
            ("eval.gt_nfe".to_string(), "200".to_string()),
            ("eval.nfes".to_string(), "[5, 8]".to_string()),
        ];
        let c = RunConfig::from_toml_str("[dc]\nlr = 0.1\n", &o).unwrap();
        assert_eq!(c.dc.lr, 0.05);
        assert_eq!(c.grid.spacing, Spacing::UniformLogsnr);
        assert_eq!(c.gt_nfe().unwrap(), 200);
        assert_eq!(c.eval_nfes(), vec![5, 8]);
        assert!(RunConfig::from_toml_str("", &[("dc.nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn all_problems_reported_together() {
        let text = "[dc]\nn = 0\nlr = -1.0\n[eval]\nn_seeds = 0\n";
        let msg = RunConfig::from_toml_str(text, &[]).unwrap_err().to_string();
        assert!(msg.contains("dc.n"), "{msg}");
        assert!(msg.contains("dc.lr"), "{msg}");
        assert!(msg.contains("seed list is empty"), "{msg}");
    }

    #[test]
    fn guidance_needs_condition() {
        assert!(RunConfig::from_toml_str("[model]\ncfg_scale = 7.5\n", &[]).is_err());
        let c = RunConfig::from_toml_str("[model]\ncfg_scale = 7.5\ncond = 1\n", &[]).unwrap();
        let m = c.build_model(7.5).unwrap();
        assert_eq!(m.dim(), 2);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::from_toml_str("[eval]\ngt_nfe = 300\n", &[]).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
