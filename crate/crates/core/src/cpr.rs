//! Cascade polynomial regression of compensation ratios.
//!
//! Ratios are modelled as a polynomial in the step index whose coefficients
//! are polynomials in the guidance scale, whose coefficients in turn are
//! polynomials in the NFE:
//!
//! ```text
//! phi2[j][k] = sum_l phi1[j][k][l] NFE^l
//! phi3[j]    = sum_k phi2[j][k]    CFG^k
//! rho_i      = sum_j phi3[j]       i^j
//! ```
//!
//! The composition is linear in `phi1`, so fitting is ordinary least squares
//! on the features `i^j CFG^k NFE^l`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dc::{CompensationSchedule, ScheduleMeta};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CPR_FORMAT_VERSION: u32 = 1;

/// Polynomial degrees `(p1, p2, p3)` in NFE, CFG and step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degrees {
    pub nfe: usize,
    pub cfg: usize,
    pub step: usize,
}

impl Degrees {
    pub fn new(p1: usize, p2: usize, p3: usize) -> Self {
        Degrees {
            nfe: p1,
            cfg: p2,
            step: p3,
        }
    }

    pub fn n_coefficients(&self) -> usize {
        (self.nfe + 1) * (self.cfg + 1) * (self.step + 1)
    }

    fn index(&self, j: usize, k: usize, l: usize) -> usize {
        (j * (self.cfg + 1) + k) * (self.nfe + 1) + l
    }
}

impl Default for Degrees {
    fn default() -> Self {
        Degrees::new(2, 2, 4)
    }
}

/// Per-axis divisors applied to the features while solving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub step: f64,
    pub cfg: f64,
    pub nfe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CprCoefficients<T> {
    pub degrees: Degrees,
    /// Flattened `phi1[j][k][l]`, step-index power major, then CFG, then NFE.
    pub phi1: Vec<T>,
    pub feature_scaling: FeatureScaling,
}

/// One training observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioSample<T> {
    pub step: usize,
    pub cfg: T,
    pub nfe: usize,
    pub rho: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CprFit<T> {
    pub coefficients: CprCoefficients<T>,
    pub residual_rms: T,
    pub residual_max: T,
    pub n_samples: usize,
}

/// Collects `(i, cfg, nfe, rho_i)` for every searched step `i >= K`.
pub fn samples_from_schedules<T: Scalar>(schedules: &[CompensationSchedule<T>]) -> Vec<RatioSample<T>> {
    schedules
        .iter()
        .flat_map(|s| {
            (s.k..s.meta.nfe).map(move |i| RatioSample {
                step: i,
                cfg: T::lit(s.meta.cfg_scale),
                nfe: s.meta.nfe,
                rho: s.rho[i],
            })
        })
        .collect()
}

fn distinct<T: Scalar>(mut v: Vec<T>) -> usize {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v.len()
}

/// Least-squares fit of `phi1` from searched schedules.
pub fn cpr_fit<T: Scalar>(schedules: &[CompensationSchedule<T>], degrees: Degrees) -> Result<CprFit<T>> {
    fit_samples(&samples_from_schedules(schedules), degrees)
}

pub fn fit_samples<T: Scalar>(samples: &[RatioSample<T>], degrees: Degrees) -> Result<CprFit<T>> {
    if samples.iter().any(|s| !(s.rho.is_finite() && s.cfg.is_finite())) {
        return Err(Error::Numerical("non-finite training sample".into()));
    }
    let steps = distinct(samples.iter().map(|s| T::from_usize(s.step).unwrap()).collect());
    let cfgs = distinct(samples.iter().map(|s| s.cfg).collect());
    let nfes = distinct(samples.iter().map(|s| T::from_usize(s.nfe).unwrap()).collect());
    for (axis, have, deg) in [("step", steps, degrees.step), ("cfg", cfgs, degrees.cfg), ("nfe", nfes, degrees.nfe)] {
        if have <= deg {
            return Err(Error::RankDeficient {
                axis,
                detail: format!("{have} distinct values cannot fit degree {deg}"),
            });
        }
    }

    let p = degrees.n_coefficients();
    if samples.len() < p {
        return Err(Error::Config(format!(
            "{} samples cannot determine {p} coefficients",
            samples.len()
        )));
    }
    let max_abs = |f: &dyn Fn(&RatioSample<T>) -> T| {
        samples.iter().map(f).fold(T::zero(), |a, b| a.max(b.abs())).max(T::min_positive_value())
    };
    let si = max_abs(&|s| T::from_usize(s.step).unwrap());
    let sc = max_abs(&|s| s.cfg);
    let sn = max_abs(&|s| T::from_usize(s.nfe).unwrap());

    let rows: Vec<Vec<T>> = samples
        .iter()
        .map(|s| features(&degrees, T::from_usize(s.step).unwrap() / si, s.cfg / sc, T::from_usize(s.nfe).unwrap() / sn))
        .collect();
    let rhs: Vec<T> = samples.iter().map(|s| s.rho).collect();
    let scaled = least_squares(rows, rhs)?;

    let mut phi1 = vec![T::zero(); p];
    for j in 0..=degrees.step {
        for k in 0..=degrees.cfg {
            for l in 0..=degrees.nfe {
                let idx = degrees.index(j, k, l);
                phi1[idx] = scaled[idx] / (si.powi(j as i32) * sc.powi(k as i32) * sn.powi(l as i32));
            }
        }
    }
    let coefficients = CprCoefficients {
        degrees,
        phi1,
        feature_scaling: FeatureScaling {
            step: si.to_f64_lossy(),
            cfg: sc.to_f64_lossy(),
            nfe: sn.to_f64_lossy(),
        },
    };
    let mut sq = T::zero();
    let mut worst = T::zero();
    for s in samples {
        let r = coefficients.predict_ratio(s.step, s.cfg, s.nfe) - s.rho;
        sq = sq + r * r;
        worst = worst.max(r.abs());
    }
    Ok(CprFit {
        coefficients,
        residual_rms: (sq / T::from_usize(samples.len()).unwrap()).sqrt(),
        residual_max: worst,
        n_samples: samples.len(),
    })
}

fn features<T: Scalar>(d: &Degrees, i: T, cfg: T, nfe: T) -> Vec<T> {
    let mut out = vec![T::zero(); d.n_coefficients()];
    let mut pi = T::one();
    for j in 0..=d.step {
        let mut pc = T::one();
        for k in 0..=d.cfg {
            let mut pn = T::one();
            for l in 0..=d.nfe {
                out[d.index(j, k, l)] = pi * pc * pn;
                pn = pn * nfe;
            }
            pc = pc * cfg;
        }
        pi = pi * i;
    }
    out
}

/// Householder QR least squares for a tall dense system.
fn least_squares<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Result<Vec<T>> {
    let (n, p) = (a.len(), a[0].len());
    let mut diag_max = T::zero();
    for c in 0..p {
        let norm = (c..n).map(|r| a[r][c] * a[r][c]).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(Error::RankDeficient {
                axis: "joint",
                detail: format!("feature column {c} vanishes"),
            });
        }
        let alpha = if a[c][c] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (c..n).map(|r| a[r][c]).collect();
        v[0] = v[0] - alpha;
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 > T::zero() {
            for cc in c..p {
                let dot: T = (c..n).map(|r| v[r - c] * a[r][cc]).sum();
                let f = (dot + dot) / vnorm2;
                for r in c..n {
                    a[r][cc] = a[r][cc] - f * v[r - c];
                }
            }
            let dot: T = (c..n).map(|r| v[r - c] * b[r]).sum();
            let f = (dot + dot) / vnorm2;
            for r in c..n {
                b[r] = b[r] - f * v[r - c];
            }
        }
        diag_max = diag_max.max(a[c][c].abs());
    }
    let tol = diag_max * T::epsilon() * T::from_usize(n.max(p)).unwrap() * T::lit(16.0);
    if let Some(c) = (0..p).find(|&c| a[c][c].abs() <= tol) {
        return Err(Error::RankDeficient {
            axis: "joint",
            detail: format!("design matrix loses rank at coefficient {c}"),
        });
    }
    let mut x = vec![T::zero(); p];
    for c in (0..p).rev() {
        let s: T = ((c + 1)..p).map(|cc| a[c][cc] * x[cc]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Ok(x)
}

#[derive(Serialize, Deserialize)]
struct CprFile {
    version: u32,
    degrees: [usize; 3],
    phi1: Vec<f64>,
    feature_scaling: FeatureScaling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

impl<T: Scalar> CprCoefficients<T> {
    /// Expanded multilinear form `sum phi1[j][k][l] i^j CFG^k NFE^l`.
    pub fn predict_ratio(&self, step: usize, cfg: T, nfe: usize) -> T {
        let d = &self.degrees;
        let f = features(d, T::from_usize(step).unwrap(), cfg, T::from_usize(nfe).unwrap());
        f.iter().zip(&self.phi1).map(|(&a, &b)| a * b).sum()
    }

    /// Stepwise evaluation: NFE polynomials, then CFG, then the step index.
    pub fn predict_cascade(&self, step: usize, cfg: T, nfe: usize) -> T {
        let d = &self.degrees;
        let horner = |coeffs: &[T], x: T| coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + c);
        let nfe = T::from_usize(nfe).unwrap();
        let phi3: Vec<T> = (0..=d.step)
            .map(|j| {
                let phi2: Vec<T> = (0..=d.cfg)
                    .map(|k| horner(&self.phi1[d.index(j, k, 0)..=d.index(j, k, d.nfe)], nfe))
                    .collect();
                horner(&phi2, cfg)
            })
            .collect();
        horner(&phi3, T::from_usize(step).unwrap())
    }

    /// Predicted schedule for `meta.nfe` and `meta.cfg_scale`; ratios before
    /// `k` are 1 and the rest are clamped to `[rho_min, rho_max]`.
    pub fn predict_schedule(&self, meta: ScheduleMeta, k: usize, rho_min: T, rho_max: T) -> Result<CompensationSchedule<T>> {
        if meta.nfe < k + 1 {
            return Err(Error::Config(format!("nfe {} too small for K={k}", meta.nfe)));
        }
        let cfg = T::lit(meta.cfg_scale);
        let rho = (0..meta.nfe)
            .map(|i| {
                if i < k {
                    T::one()
                } else {
                    self.predict_ratio(i, cfg, meta.nfe).max(rho_min).min(rho_max)
                }
            })
            .collect();
        CompensationSchedule::new(rho, k, meta)
    }

    pub fn to_json(&self, config: Option<serde_json::Value>) -> Result<String> {
        let d = self.degrees;
        let file = CprFile {
            version: CPR_FORMAT_VERSION,
            degrees: [d.nfe, d.cfg, d.step],
            phi1: self.phi1.iter().map(|v| v.to_f64_lossy()).collect(),
            feature_scaling: self.feature_scaling,
            config,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CprFile = serde_json::from_str(s)?;
        if file.version != CPR_FORMAT_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: CPR_FORMAT_VERSION,
            });
        }
        let degrees = Degrees::new(file.degrees[0], file.degrees[1], file.degrees[2]);
        if file.phi1.len() != degrees.n_coefficients() {
            return Err(Error::Config(format!(
                "phi1 has {} entries, degrees need {}",
                file.phi1.len(),
                degrees.n_coefficients()
            )));
        }
        if file.phi1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite CPR coefficient".into()));
        }
        Ok(CprCoefficients {
            degrees,
            phi1: file.phi1.into_iter().map(T::lit).collect(),
            feature_scaling: file.feature_scaling,
        })
    }

    pub fn save(&self, path: &Path, config: Option<serde_json::Value>) -> Result<()> {
        std::fs::write(path, self.to_json(config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
