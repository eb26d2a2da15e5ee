use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::Spacing;
use crate::solver::SamplerConfig;

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;

/// Sampling configuration a compensation schedule was searched for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub nfe: usize,
    pub cfg_scale: f64,
    pub spacing: Spacing,
    pub sampler_order: usize,
    pub use_corrector: bool,
}

impl ScheduleMeta {
    pub fn for_sampler<T: Scalar>(cfg: &SamplerConfig<T>, cfg_scale: f64) -> Self {
        ScheduleMeta {
            nfe: cfg.nfe(),
            cfg_scale,
            spacing: cfg.grid.spacing(),
            sampler_order: cfg.order,
            use_corrector: cfg.use_corrector,
        }
    }
}

/// Per-step compensation ratios `rho_0 .. rho_(M-1)`; the first `k` are 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationSchedule<T> {
    pub rho: Vec<T>,
    pub k: usize,
    pub meta: ScheduleMeta,
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    version: u32,
    sampler_order: usize,
    use_corrector: bool,
    #[serde(rename = "K")]
    k: usize,
    nfe: usize,
    cfg: f64,
    spacing: Spacing,
    rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

impl<T: Scalar> CompensationSchedule<T> {
    pub fn new(rho: Vec<T>, k: usize, meta: ScheduleMeta) -> Result<Self> {
        if rho.len() != meta.nfe {
            return Err(Error::Config(format!(
                "{} ratios for nfe {}",
                rho.len(),
                meta.nfe
            )));
        }
        if k == 0 || k >= meta.nfe {
            return Err(Error::Config(format!("compensation order K={k} invalid for nfe {}", meta.nfe)));
        }
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numerical("non-finite compensation ratio".into()));
        }
        if rho[..k].iter().any(|&r| r != T::one()) {
            return Err(Error::Config(format!("the first {k} ratios must be exactly 1")));
        }
        Ok(CompensationSchedule { rho, k, meta })
    }

    /// The identity schedule `rho = 1` everywhere.
    pub fn ones(k: usize, meta: ScheduleMeta) -> Result<Self> {
        Self::new(vec![T::one(); meta.nfe], k, meta)
    }

    pub fn is_within(&self, lo: T, hi: T) -> bool {
        self.rho.iter().all(|&r| r >= lo && r <= hi)
    }

    pub fn to_json(&self, config: Option<serde_json::Value>) -> Result<String> {
        let file = ScheduleFile {
            version: SCHEDULE_FORMAT_VERSION,
            sampler_order: self.meta.sampler_order,
            use_corrector: self.meta.use_corrector,
            k: self.k,
            nfe: self.meta.nfe,
            cfg: self.meta.cfg_scale,
            spacing: self.meta.spacing,
            rho: self.rho.iter().map(|r| r.to_f64_lossy()).collect(),
            config,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ScheduleFile = serde_json::from_str(s)?;
        if file.version != SCHEDULE_FORMAT_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: SCHEDULE_FORMAT_VERSION,
            });
        }
        let meta = ScheduleMeta {
            nfe: file.nfe,
            cfg_scale: file.cfg,
            spacing: file.spacing,
            sampler_order: file.sampler_order,
            use_corrector: file.use_corrector,
        };
        Self::new(file.rho.into_iter().map(T::lit).collect(), file.k, meta)
    }

    pub fn save(&self, path: &Path, config: Option<serde_json::Value>) -> Result<()> {
        std::fs::write(path, self.to_json(config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
