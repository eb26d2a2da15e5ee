//! Independent oracles for the numerical kernels, plus property tests.

use dc_solver::dc::{lagrange_compensate, search_step, CompensationSchedule, Optimizer, ScheduleMeta, SearchConfig};
use dc_solver::eval::{ground_truth, initial_noise};
use dc_solver::model::{convert, DenoisingModel, GaussianMixture, ModelOutput, Parameterization};
use dc_solver::schedule::{NoiseSchedule, Spacing, TimeGrid};
use dc_solver::solver::{exp_integrals, predictor_step, Buffer, Sampler, SamplerConfig};
use dc_solver::{mean_sq_diff, Result};
use proptest::prelude::*;

/// Composite 5-point Gauss-Legendre rule on `[a, b]`.
fn gauss<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    const X: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let w = (b - a) / panels as f64;
    let mut sum = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * w;
        for (x, wt) in X.iter().zip(W) {
            sum += wt * 0.5 * w * f(mid + 0.5 * w * x);
        }
    }
    sum
}

#[test]
fn mixture_noise_prediction_matches_quadrature() {
    let s = NoiseSchedule::<f64>::vp_linear_default();
    let t = s.inverse_lambda((0.8f64 / 0.6).ln()).unwrap();
    let (alpha, sigma, _) = s.alpha_sigma_lambda(t).unwrap();
    assert!((alpha - 0.8).abs() < 1e-9 && (sigma - 0.6).abs() < 1e-9);
    let m = GaussianMixture::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5], 0.1, s).unwrap();
    let x = 0.9;

    // posterior mean of x0 by integrating over the data density
    let normal = |z: f64, sd: f64| (-0.5 * (z / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let q0 = |x0: f64| 0.5 * normal(x0 - 1.0, 0.1) + 0.5 * normal(x0 + 1.0, 0.1);
    let like = |x0: f64| normal(x - alpha * x0, sigma);
    let z = gauss(|x0| q0(x0) * like(x0), -3.0, 3.0, 4000);
    let mean = gauss(|x0| x0 * q0(x0) * like(x0), -3.0, 3.0, 4000) / z;
    let eps_oracle = (x - alpha * mean) / sigma;

    let eps = m.noise_prediction(&[x], t, None).unwrap()[0];
    assert!((eps - eps_oracle).abs() < 1e-8, "{eps} vs {eps_oracle}");
}

#[test]
fn exp_integrals_match_quadrature() {
    for h in [1e-4, 0.02, 0.4, 0.999, 1.001, 3.0, 8.0] {
        let m = exp_integrals(h, 4).unwrap();
        for (k, &mk) in m.iter().enumerate() {
            let q = gauss(|u| (u - h).exp() * u.powi(k as i32), 0.0, h, 1000);
            assert!((mk - q).abs() <= 1e-12 * q.abs().max(1.0), "h={h} k={k}: {mk} vs {q}");
        }
    }
}

/// Outputs a fixed polynomial in log-SNR regardless of the state.
struct PolyInLambda {
    coef: Vec<f64>,
    param: Parameterization,
    schedule: NoiseSchedule<f64>,
}

impl PolyInLambda {
    fn at_lambda(&self, l: f64) -> f64 {
        self.coef.iter().rev().fold(0.0, |acc, &c| acc * l + c)
    }
}

impl DenoisingModel<f64> for PolyInLambda {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, _x: &[f64], t: f64, _cond: Option<u32>) -> Result<ModelOutput<f64>> {
        Ok(ModelOutput::new(self.param, vec![self.at_lambda(self.schedule.lambda(t))], t))
    }
}

#[test]
fn predictor_is_exact_for_low_degree_outputs() {
    let s = NoiseSchedule::<f64>::vp_linear_default();
    let grid = TimeGrid::new(&s, 10, Spacing::UniformT).unwrap();
    for param in [Parameterization::DataPred, Parameterization::NoisePred] {
        for order in 1..=3 {
            let model = PolyInLambda {
                coef: [0.7, -0.3, 0.05][..order].to_vec(),
                param,
                schedule: s,
            };
            let cfg = SamplerConfig::new(order, false, param, grid.clone(), s).unwrap();
            let i = 6;
            let mut buffer = Buffer::new(order);
            for j in (0..order).rev() {
                let t = grid.time(i - 1 - j);
                buffer.push(model.evaluate(&[0.0], t, None).unwrap()).unwrap();
            }
            let (t_s, t_t) = (grid.time(i - 1), grid.time(i));
            let x_s = 0.37;
            let got = predictor_step(&[x_s], &buffer, i, order, &cfg).unwrap()[0];

            let (a_s, s_s, l_s) = s.alpha_sigma_lambda(t_s).unwrap();
            let (a_t, s_t, l_t) = s.alpha_sigma_lambda(t_t).unwrap();
            let exact = match param {
                Parameterization::DataPred => {
                    s_t / s_s * x_s + s_t * gauss(|l| l.exp() * model.at_lambda(l), l_s, l_t, 200)
                }
                _ => a_t / a_s * x_s - a_t * gauss(|l| (-l).exp() * model.at_lambda(l), l_s, l_t, 200),
            };
            assert!((got - exact).abs() < 1e-12, "{param:?} order {order}: {got} vs {exact}");
        }
    }
}

#[test]
fn single_gaussian_error_shrinks_with_nfe() {
    let s = NoiseSchedule::<f64>::vp_linear_default();
    let m = GaussianMixture::single(vec![0.5, -0.25], 0.4, s).unwrap();
    let x = initial_noise::<f64>(11, 2);
    let exact = m.flow_solution(&x, s.t_start, s.t_end).unwrap();
    for order in 1..=3 {
        let mut prev = f64::INFINITY;
        for nfe in [10, 20, 40, 80] {
            let grid = TimeGrid::new(&s, nfe, Spacing::UniformLogsnr).unwrap();
            let cfg = SamplerConfig::data_pred(order, true, grid, s).unwrap();
            let err = mean_sq_diff(Sampler::new(&m, &cfg).sample(&x, None).unwrap().endpoint(), &exact).sqrt();
            assert!(err < prev, "order {order} nfe {nfe}: {err} >= {prev}");
            prev = err;
        }
        let bound = [2e-3, 1e-4, 1e-5][order - 1];
        assert!(prev < bound, "order {order}: {prev}");
    }
}

fn gt_endpoint_error(m: &GaussianMixture<f64>, spacing: Spacing, gt_nfe: usize) -> f64 {
    let s = *m.schedule();
    let coarse = TimeGrid::new(&s, 7, spacing).unwrap();
    (0..4)
        .map(|seed| {
            let x = initial_noise::<f64>(seed, 3);
            let gt = ground_truth(m, None, &x, &s, &coarse, gt_nfe).unwrap();
            let exact = m.flow_solution(&x, s.t_start, s.t_end).unwrap();
            gt[7].iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn ground_truth_matches_closed_form() {
    let s = NoiseSchedule::<f64>::vp_linear_default();
    let m = GaussianMixture::single(vec![1.2, -0.6, 0.1], 0.3, s).unwrap();
    for spacing in [Spacing::UniformLogsnr, Spacing::UniformT, Spacing::QuadraticT] {
        // first order: ~1e-3 at 999 fine steps, halving with each doubling
        let e999 = gt_endpoint_error(&m, spacing, 999);
        let e1998 = gt_endpoint_error(&m, spacing, 1998);
        assert!(e999 < 3e-3, "{spacing:?}: {e999}");
        assert!((e999 / e1998 - 2.0).abs() < 0.2, "{spacing:?}: {e999} / {e1998}");
        let fine = gt_endpoint_error(&m, spacing, 19_999);
        assert!(fine < 1e-4, "{spacing:?}: {fine}");
    }
}

#[test]
fn ground_truth_hits_coarse_times_exactly() {
    let s = NoiseSchedule::<f64>::vp_linear_default();
    let m = GaussianMixture::single(vec![1.2, -0.6, 0.1], 0.3, s).unwrap();
    let coarse = TimeGrid::new(&s, 7, Spacing::UniformLogsnr).unwrap();
    let x = initial_noise::<f64>(5, 3);
    let gt = ground_truth(&m, None, &x, &s, &coarse, 999).unwrap();
    assert_eq!(gt.len(), 8);
    assert_eq!(gt[0], x);
    for (i, state) in gt.iter().enumerate() {
        let exact = m.flow_solution(&x, s.t_start, coarse.time(i)).unwrap();
        for (a, b) in state.iter().zip(&exact) {
            assert!((a - b).abs() < 3e-3, "index {i}: {a} vs {b}");
        }
    }
}

fn search_fixture(n: usize, nfe: usize) -> (GaussianMixture<f64>, SamplerConfig<f64>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let s = NoiseSchedule::<f64>::vp_linear_default();
    let m = GaussianMixture::new(
        vec![vec![1.0, 0.5], vec![-1.0, 0.0], vec![0.2, -1.3]],
        vec![0.3, 0.3, 0.4],
        0.25,
        s,
    )
    .unwrap();
    let grid = TimeGrid::new(&s, nfe, Spacing::UniformLogsnr).unwrap();
    let cfg = SamplerConfig::data_pred(2, true, grid.clone(), s).unwrap();
    let xs: Vec<Vec<f64>> = (0..n as u64).map(|seed| initial_noise(seed, 2)).collect();
    let gt = xs.iter().map(|x| ground_truth(&m, None, x, &s, &grid, 200).unwrap()).collect();
    (m, cfg, xs, gt)
}

#[test]
fn search_finds_grid_minimum() {
    let (m, cfg, xs, gt) = search_fixture(6, 6);
    let sampler = Sampler::new(&m, &cfg);
    // states at grid index 3 of the uncompensated runs
    let states: Vec<_> = xs
        .iter()
        .map(|x| {
            let mut st = sampler.init(x).unwrap();
            for _ in 0..3 {
                st = sampler.step(&st).unwrap().state;
            }
            st
        })
        .collect();
    let targets: Vec<&[f64]> = gt.iter().map(|g| g[4].as_slice()).collect();
    let loss = |rho: f64| {
        states
            .iter()
            .zip(&targets)
            .map(|(st, g)| {
                let next = sampler.step(&sampler.compensate(st, rho, 2).unwrap()).unwrap();
                mean_sq_diff(&next.state.x, g)
            })
            .sum::<f64>()
            / states.len() as f64
    };
    let oracle = (0..=4000).map(|j| loss(j as f64 * 5e-4)).fold(f64::INFINITY, f64::min);
    for optimizer in [Optimizer::GoldenSection, Optimizer::GridRefine, Optimizer::AdamFd] {
        let sc = SearchConfig {
            optimizer,
            iterations: if optimizer == Optimizer::AdamFd { 200 } else { 40 },
            ..SearchConfig::default()
        };
        let found = search_step(&sampler, &states, &targets, &sc).unwrap();
        assert!((found.loss_at_best - loss(found.rho)).abs() <= 1e-15 * loss(found.rho).max(1.0));
        assert!(
            found.loss_at_best <= oracle * (1.0 + 1e-3),
            "{optimizer:?}: {} vs oracle {oracle}",
            found.loss_at_best
        );
    }
}

#[test]
fn unit_schedule_search_report_is_consistent() {
    let (m, cfg, xs, _) = search_fixture(1, 5);
    let meta = ScheduleMeta::for_sampler(&cfg, 1.0);
    let ones = CompensationSchedule::ones(2, meta).unwrap();
    let sampler = Sampler::new(&m, &cfg);
    assert_eq!(
        sampler.sample(&xs[0], Some(&ones)).unwrap().states,
        sampler.sample(&xs[0], None).unwrap().states
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parameterizations_round_trip(
        t in 0.002f64..0.998,
        x in prop::collection::vec(-4.0f64..4.0, 3),
        v in prop::collection::vec(-4.0f64..4.0, 3),
        from in 0usize..3,
        to in 0usize..3,
    ) {
        let s = NoiseSchedule::<f64>::vp_linear_default();
        let (from, to) = (Parameterization::ALL[from], Parameterization::ALL[to]);
        let out = ModelOutput::new(from, v.clone(), t);
        let back = convert(&convert(&out, &x, &s, to).unwrap(), &x, &s, from).unwrap();
        for (a, b) in back.value.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()) / s.alpha_sigma_lambda(t).unwrap().0.min(s.alpha_sigma_lambda(t).unwrap().1));
        }
    }

    #[test]
    fn compensation_reproduces_quadratics(
        c in prop::array::uniform3(-5.0f64..5.0),
        t0 in 0.5f64..1.0,
        gaps in prop::array::uniform2(0.02f64..0.2),
        rho in 0.0f64..2.0,
    ) {
        let times = [t0, t0 - gaps[0], t0 - gaps[0] - gaps[1]];
        let q = |t: f64| c[0] + c[1] * t + c[2] * t * t;
        let mut buf = Buffer::new(3);
        for &t in &times {
            buf.push(ModelOutput::new(Parameterization::DataPred, vec![q(t)], t)).unwrap();
        }
        let est = lagrange_compensate(&buf, rho, 2).unwrap();
        let t_prime = rho * times[2] + (1.0 - rho) * times[1];
        prop_assert!((est.value[0] - q(t_prime)).abs() < 1e-10);
        prop_assert_eq!(est.t, times[2]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn search_never_exceeds_unit_loss(
        step in 2usize..5,
        lo in 0.0f64..0.9,
        hi in 1.05f64..2.5,
        opt in 0usize..3,
        iterations in 1usize..8,
    ) {
        let (m, cfg, xs, gt) = search_fixture(3, 5);
        let sampler = Sampler::new(&m, &cfg);
        let states: Vec<_> = xs
            .iter()
            .map(|x| {
                let mut st = sampler.init(x).unwrap();
                for _ in 0..step {
                    st = sampler.step(&st).unwrap().state;
                }
                st
            })
            .collect();
        let targets: Vec<&[f64]> = gt.iter().map(|g| g[step + 1].as_slice()).collect();
        let sc = SearchConfig {
            optimizer: [Optimizer::AdamFd, Optimizer::GoldenSection, Optimizer::GridRefine][opt],
            iterations,
            rho_min: lo,
            rho_max: hi,
            ..SearchConfig::default()
        };
        let found = search_step(&sampler, &states, &targets, &sc).unwrap();
        prop_assert!(found.loss_at_best <= found.loss_at_one);
        prop_assert!(found.rho >= lo && found.rho <= hi);
    }
}
