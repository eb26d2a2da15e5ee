//! Continuous variance-preserving noise schedules and sampling time grids.
//!
//! A schedule maps a continuous time `t` to the marginal coefficients
//! `alpha_t`, `sigma_t` of `x_t = alpha_t x_0 + sigma_t eps` together with the
//! log signal-to-noise ratio `lambda_t = ln(alpha_t / sigma_t)`. Sampling runs
//! from `t_start` (noise) down to `t_end` (data).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default continuous-time cutoff near the data end.
pub const DEFAULT_T_END: f64 = 1e-3;
/// Default start time for the cosine schedule, where `lambda` is still well
/// conditioned.
pub const DEFAULT_COSINE_T_START: f64 = 0.9946;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(deserialize = "T: Scalar"))]
pub enum ScheduleKind<T> {
    /// Linear `beta(t) = beta_0 + t (beta_1 - beta_0)`.
    VpLinear { beta_0: T, beta_1: T },
    /// Cosine schedule with the usual small offset `s = 0.008`.
    VpCosine,
}

impl<T: Scalar> ScheduleKind<T> {
    pub fn vp_linear_default() -> Self {
        ScheduleKind::VpLinear {
            beta_0: T::lit(0.1),
            beta_1: T::lit(20.0),
        }
    }
}

/// Marginal coefficients at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marginal<T> {
    pub alpha: T,
    pub sigma: T,
    pub lambda: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct NoiseSchedule<T> {
    pub kind: ScheduleKind<T>,
    pub t_start: T,
    pub t_end: T,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(kind: ScheduleKind<T>, t_start: T, t_end: T) -> Result<Self> {
        if !(t_end > T::zero() && t_end < t_start && t_start <= T::one()) {
            return Err(Error::Config(format!(
                "schedule bounds must satisfy 0 < t_end < t_start <= 1, got t_end={t_end}, t_start={t_start}"
            )));
        }
        if let ScheduleKind::VpLinear { beta_0, beta_1 } = kind {
            if !(beta_0 > T::zero() && beta_1 > beta_0) {
                return Err(Error::Config(format!(
                    "vp_linear needs 0 < beta_0 < beta_1, got ({beta_0}, {beta_1})"
                )));
            }
        }
        if matches!(kind, ScheduleKind::VpCosine) && t_start >= T::one() {
            return Err(Error::Config("vp_cosine has alpha = 0 at t = 1; use t_start < 1".into()));
        }
        let s = NoiseSchedule {
            kind,
            t_start,
            t_end,
        };
        for t in [t_start, t_end] {
            let m = s.marginal(t);
            if !(m.lambda.is_finite() && m.alpha > T::zero() && m.sigma > T::zero()) {
                return Err(Error::Config(format!(
                    "schedule degenerate at t={t}: alpha={}, sigma={}",
                    m.alpha, m.sigma
                )));
            }
        }
        Ok(s)
    }

    /// Linear VP schedule with `beta_0 = 0.1`, `beta_1 = 20`, on `[1e-3, 1]`.
    pub fn vp_linear_default() -> Self {
        Self::new(ScheduleKind::vp_linear_default(), T::one(), T::lit(DEFAULT_T_END))
            .expect("default schedule is valid")
    }

    pub fn vp_cosine_default() -> Self {
        Self::new(
            ScheduleKind::VpCosine,
            T::lit(DEFAULT_COSINE_T_START),
            T::lit(DEFAULT_T_END),
        )
        .expect("default schedule is valid")
    }

    pub fn log_alpha(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::VpLinear { beta_0, beta_1 } => {
                -T::lit(0.25) * t * t * (beta_1 - beta_0) - T::lit(0.5) * t * beta_0
            }
            ScheduleKind::VpCosine => {
                let s = T::lit(COSINE_OFFSET);
                let half_pi = T::lit(std::f64::consts::FRAC_PI_2);
                let f = |u: T| ((u + s) / (T::one() + s) * half_pi).cos().ln();
                f(t) - f(T::zero())
            }
        }
    }

    /// `alpha`, `sigma`, `lambda` without a range check.
    pub fn marginal(&self, t: T) -> Marginal<T> {
        let log_alpha = self.log_alpha(t);
        // sigma^2 = 1 - alpha^2 computed without cancellation near t = 0
        let sigma_sq = -(log_alpha + log_alpha).exp_m1();
        Marginal {
            alpha: log_alpha.exp(),
            sigma: sigma_sq.sqrt(),
            lambda: log_alpha - T::lit(0.5) * sigma_sq.ln(),
        }
    }

    pub fn check_range(&self, t: T) -> Result<()> {
        if t >= self.t_end && t <= self.t_start {
            Ok(())
        } else {
            Err(Error::Range {
                t: t.to_f64_lossy(),
                t_end: self.t_end.to_f64_lossy(),
                t_start: self.t_start.to_f64_lossy(),
            })
        }
    }

    /// Range-checked `(alpha, sigma, lambda)` at `t`.
    pub fn alpha_sigma_lambda(&self, t: T) -> Result<(T, T, T)> {
        self.check_range(t)?;
        let m = self.marginal(t);
        Ok((m.alpha, m.sigma, m.lambda))
    }

    pub fn lambda(&self, t: T) -> T {
        self.marginal(t).lambda
    }

    /// Drift and squared diffusion of the forward SDE,
    /// `f(t) = d log alpha / dt` and `g^2(t) = d sigma^2/dt - 2 f sigma^2`.
    /// Under VP normalization the latter reduces to `-2 f(t)`.
    pub fn drift(&self, t: T) -> (T, T) {
        let f = match self.kind {
            ScheduleKind::VpLinear { beta_0, beta_1 } => {
                -T::lit(0.5) * (beta_0 + t * (beta_1 - beta_0))
            }
            ScheduleKind::VpCosine => {
                let s = T::lit(COSINE_OFFSET);
                let half_pi = T::lit(std::f64::consts::FRAC_PI_2);
                let k = half_pi / (T::one() + s);
                -k * ((t + s) * k).tan()
            }
        };
        (f, -(f + f))
    }

    /// Inverse of `lambda(t)` by bisection on `[t_end, t_start]`.
    pub fn inverse_lambda(&self, lambda: T) -> Result<T> {
        let (hi_l, lo_l) = (self.lambda(self.t_end), self.lambda(self.t_start));
        if !(lambda >= lo_l && lambda <= hi_l) {
            return Err(Error::Range {
                t: lambda.to_f64_lossy(),
                t_end: lo_l.to_f64_lossy(),
                t_start: hi_l.to_f64_lossy(),
            });
        }
        if lambda == hi_l {
            return Ok(self.t_end);
        }
        if lambda == lo_l {
            return Ok(self.t_start);
        }
        let (mut lo, mut hi) = (self.t_end, self.t_start);
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(4.0));
        for _ in 0..200 {
            if hi - lo <= tol {
                break;
            }
            let mid = T::lit(0.5) * (lo + hi);
            // lambda is decreasing in t
            if self.lambda(mid) > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(T::lit(0.5) * (lo + hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    UniformT,
    UniformLogsnr,
    QuadraticT,
}

impl Spacing {
    pub fn as_str(self) -> &'static str {
        match self {
            Spacing::UniformT => "uniform_t",
            Spacing::UniformLogsnr => "uniform_logsnr",
            Spacing::QuadraticT => "quadratic_t",
        }
    }
}

/// Strictly decreasing sampling times `t_0 > t_1 > ... > t_M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct TimeGrid<T> {
    timesteps: Vec<T>,
    spacing: Spacing,
}

impl<T: Scalar> TimeGrid<T> {
    /// Builds a grid of `nfe + 1` times spanning the schedule.
    pub fn new(schedule: &NoiseSchedule<T>, nfe: usize, spacing: Spacing) -> Result<Self> {
        if nfe < 2 {
            return Err(Error::Config(format!("nfe must be >= 2, got {nfe}")));
        }
        let n = T::from_usize(nfe).unwrap();
        let (t0, t1) = (schedule.t_start, schedule.t_end);
        let mut timesteps = Vec::with_capacity(nfe + 1);
        match spacing {
            Spacing::UniformT => {
                for i in 0..=nfe {
                    let f = T::from_usize(i).unwrap() / n;
                    timesteps.push(t0 + f * (t1 - t0));
                }
            }
            Spacing::QuadraticT => {
                let (a, b) = (t0.sqrt(), t1.sqrt());
                for i in 0..=nfe {
                    let f = T::from_usize(i).unwrap() / n;
                    let r = a + f * (b - a);
                    timesteps.push(r * r);
                }
            }
            Spacing::UniformLogsnr => {
                let (l0, l1) = (schedule.lambda(t0), schedule.lambda(t1));
                for i in 0..=nfe {
                    let f = T::from_usize(i).unwrap() / n;
                    let l = (l0 + f * (l1 - l0)).max(l0).min(l1);
                    timesteps.push(schedule.inverse_lambda(l)?);
                }
            }
        }
        timesteps[0] = t0;
        timesteps[nfe] = t1;
        Self::from_times(schedule, timesteps, spacing)
    }

    /// Wraps explicit times after validating ordering and endpoints.
    pub fn from_times(schedule: &NoiseSchedule<T>, timesteps: Vec<T>, spacing: Spacing) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(Error::Config("a grid needs at least two times".into()));
        }
        if timesteps[0] != schedule.t_start || *timesteps.last().unwrap() != schedule.t_end {
            return Err(Error::Config(format!(
                "grid endpoints ({}, {}) do not match schedule bounds ({}, {})",
                timesteps[0],
                timesteps.last().unwrap(),
                schedule.t_start,
                schedule.t_end
            )));
        }
        if timesteps.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("grid times must be strictly decreasing".into()));
        }
        Ok(TimeGrid { timesteps, spacing })
    }

    pub fn timesteps(&self) -> &[T] {
        &self.timesteps
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Number of steps `M` (equal to NFE for the samplers in this crate).
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn time(&self, i: usize) -> T {
        self.timesteps[i]
    }

    /// Step sizes in log-SNR, `h_i = lambda(t_i) - lambda(t_{i-1})` for `i = 1..=M`.
    pub fn logsnr_steps(&self, schedule: &NoiseSchedule<T>) -> Vec<T> {
        self.timesteps
            .windows(2)
            .map(|w| schedule.lambda(w[1]) - schedule.lambda(w[0]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> NoiseSchedule<f64> {
        NoiseSchedule::vp_linear_default()
    }

    #[test]
    fn closed_form_at_t_one() {
        let (a, s, l) = linear().alpha_sigma_lambda(1.0).unwrap();
        // -1/4 * (20 - 0.1) - 1/2 * 0.1
        let expected = (-0.25 * 19.9 - 0.05f64).exp();
        assert!((a - expected).abs() < 1e-15);
        assert!((a * a + s * s - 1.0).abs() < 1e-12);
        assert!((l - (a / s).ln()).abs() < 1e-12);
    }

    #[test]
    fn near_zero_limits() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::vp_linear_default(), 1.0, 1e-9).unwrap();
        let (a, sig, l) = s.alpha_sigma_lambda(1e-9).unwrap();
        assert!((a - 1.0).abs() < 1e-9);
        assert!(sig < 1e-4);
        assert!(l.is_finite() && l > 9.0);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        assert!(matches!(linear().alpha_sigma_lambda(1e-4), Err(Error::Range { .. })));
        assert!(matches!(linear().alpha_sigma_lambda(1.5), Err(Error::Range { .. })));
    }

    #[test]
    fn invalid_bounds() {
        let k = ScheduleKind::vp_linear_default();
        assert!(NoiseSchedule::new(k, 0.5, 0.6).is_err());
        assert!(NoiseSchedule::new(k, 1.2, 0.1).is_err());
        assert!(NoiseSchedule::new(k, 1.0, 0.0).is_err());
        // lambda diverges at t = 1 for the cosine schedule
        assert!(NoiseSchedule::<f64>::new(ScheduleKind::VpCosine, 1.0, 1e-3).is_err());
    }

    #[test]
    fn monotone_on_both_schedules() {
        for s in [linear(), NoiseSchedule::vp_cosine_default()] {
            let mut prev = s.marginal(s.t_end);
            for i in 1..=500 {
                let t = s.t_end + (s.t_start - s.t_end) * i as f64 / 500.0;
                let m = s.marginal(t);
                assert!(m.lambda < prev.lambda);
                assert!(m.alpha < prev.alpha);
                assert!(m.sigma > prev.sigma);
                assert!((m.alpha * m.alpha + m.sigma * m.sigma - 1.0).abs() < 1e-12);
                prev = m;
            }
        }
    }

    #[test]
    fn drift_matches_finite_difference() {
        for s in [linear(), NoiseSchedule::vp_cosine_default()] {
            for &t in &[0.01, 0.3, 0.7, 0.95] {
                let eps = 1e-6;
                let fd = (s.log_alpha(t + eps) - s.log_alpha(t - eps)) / (2.0 * eps);
                let (f, g2) = s.drift(t);
                assert!((f - fd).abs() < 1e-6 * (1.0 + fd.abs()), "t={t} f={f} fd={fd}");
                // g^2 = d sigma^2/dt - 2 f sigma^2
                let sig2 = |u: f64| s.marginal(u).sigma.powi(2);
                let dsig2 = (sig2(t + eps) - sig2(t - eps)) / (2.0 * eps);
                let g2_fd = dsig2 - 2.0 * f * sig2(t);
                assert!((g2 - g2_fd).abs() < 1e-5 * (1.0 + g2.abs()));
            }
        }
    }

    #[test]
    fn inverse_lambda_round_trip() {
        let s = linear();
        for &t in &[1e-3, 0.01, 0.2, 0.5, 0.999, 1.0] {
            let back = s.inverse_lambda(s.lambda(t)).unwrap();
            assert!((back - t).abs() < 1e-11, "t={t} back={back}");
        }
    }

    #[test]
    fn uniform_t_grid() {
        let g = TimeGrid::new(&linear(), 5, Spacing::UniformT).unwrap();
        assert_eq!(g.timesteps().len(), 6);
        for w in g.timesteps().windows(2) {
            assert!((w[0] - w[1] - 0.1998).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_endpoints_for_every_spacing() {
        for sp in [Spacing::UniformT, Spacing::UniformLogsnr, Spacing::QuadraticT] {
            let g = TimeGrid::new(&linear(), 2, sp).unwrap();
            assert_eq!(g.timesteps().len(), 3);
            assert_eq!(g.time(0), 1.0);
            assert_eq!(g.time(2), 1e-3);
        }
        assert!(TimeGrid::new(&linear(), 1, Spacing::UniformT).is_err());
    }

    #[test]
    fn uniform_logsnr_has_equal_steps() {
        let s = linear();
        let g = TimeGrid::new(&s, 8, Spacing::UniformLogsnr).unwrap();
        let h = g.logsnr_steps(&s);
        for hi in &h {
            assert!(*hi > 0.0);
            assert!((hi - h[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn f32_schedule_is_usable() {
        let s = NoiseSchedule::<f32>::vp_linear_default();
        let g = TimeGrid::new(&s, 10, Spacing::UniformLogsnr).unwrap();
        assert_eq!(g.steps(), 10);
        let m = s.marginal(0.5);
        assert!((m.alpha * m.alpha + m.sigma * m.sigma - 1.0).abs() < 1e-6);
    }
}
