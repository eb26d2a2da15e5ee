use dc_solver::config::RunConfig;
use dc_solver::cpr::CprCoefficients;
use dc_solver::eval::{fit_cpr_by_search, run_experiment, search_schedule, DcMode, NOISE_GENERATOR};
use dc_solver::Error;

const SMALL: &str = r#"
[grid]
nfe = 6
spacing = "uniform_logsnr"
[dc]
n = 4
iterations = 8
[eval]
gt_nfe = 200
n_seeds = 6
nfes = [5, 6, 8]
"#;

fn small(overrides: &[(&str, &str)]) -> RunConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::from_toml_str(SMALL, &o).unwrap()
}

#[test]
fn csv_is_deterministic_across_thread_counts() {
    let config = small(&[]);
    let a = run_experiment(&config).unwrap().to_csv().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| run_experiment(&config).unwrap().to_csv().unwrap());
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some("sampler,order,nfe,cfg,dc_mode,mse,slope,seconds"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn report_records_seeds_and_generator() {
    let config = small(&[("eval.seed_start", "500")]);
    let report = run_experiment(&config).unwrap();
    assert_eq!(report.noise_generator, NOISE_GENERATOR);
    assert_eq!(report.seeds.search, [0, 4]);
    assert_eq!(report.seeds.eval, [500, 506]);
    assert_eq!(report.config["format_version"], 1);
    let cell = report.cell(2, true, 6, 1.0, DcMode::Searched).unwrap();
    assert_eq!(cell.per_seed_mse.len(), 6);
    assert_eq!(cell.rho.as_ref().unwrap().len(), 6);
    assert_eq!(cell.per_step_losses.len(), 4);
    assert!(cell.slope.unwrap().is_finite());
    assert_eq!(cell.seconds, 0.0);

    let dir = tempfile::tempdir().unwrap();
    let (csv, json) = report.write(dir.path(), "run").unwrap();
    assert!(csv.exists());
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(parsed["cells"].as_array().unwrap().len(), 6);
}

#[test]
fn empty_seed_list_is_a_config_error() {
    let o = vec![("eval.n_seeds".to_string(), "0".to_string())];
    match RunConfig::from_toml_str(SMALL, &o) {
        Err(Error::Config(msg)) => assert!(msg.contains("seed list is empty"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn missing_ground_truth_resolution_is_reported() {
    let config = RunConfig::from_toml_str("", &[]).unwrap();
    let err = run_experiment(&config).unwrap_err();
    assert!(err.to_string().contains("gt_nfe"), "{err}");
}

#[test]
fn searched_schedule_improves_search_points() {
    let config = small(&[]);
    let spec = config.sampler;
    let (schedule, report) = search_schedule(&config, &spec, 6, 1.0).unwrap();
    assert_eq!(schedule.rho[..2], [1.0, 1.0]);
    assert!(report.steps.iter().all(|s| s.loss_at_best <= s.loss_at_one));
    assert!(report.endpoint_mse_searched.is_finite());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rho.json");
    schedule.save(&path, Some(config.to_json_value())).unwrap();
    let back = dc_solver::dc::CompensationSchedule::<f64>::load(&path).unwrap();
    assert_eq!(back.rho, schedule.rho);
}

#[test]
fn cpr_mode_uses_fitted_coefficients() {
    let config = small(&[
        ("cpr.train_nfe", "[6, 8, 10]"),
        ("cpr.train_cfg", "[1.0]"),
        ("cpr.degrees", "[2, 0, 2]"),
    ]);
    let spec = config.sampler;
    let (fit, schedules) = fit_cpr_by_search(&config, &spec).unwrap();
    assert_eq!(schedules.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cpr.json");
    fit.coefficients.save(&path, None).unwrap();
    assert_eq!(CprCoefficients::<f64>::load(&path).unwrap(), fit.coefficients);

    let eval = small(&[
        ("eval.nfes", "[7]"),
        ("eval.dc_modes", "[\"off\", \"cpr\"]"),
        ("cpr.file", &format!("{:?}", path.display().to_string())),
    ]);
    let report = run_experiment(&eval).unwrap();
    let cell = report.cell(2, true, 7, 1.0, DcMode::Cpr).unwrap();
    let rho = cell.rho.as_ref().unwrap();
    assert_eq!(rho.len(), 7);
    assert_eq!(rho[..2], [1.0, 1.0]);
    for (i, &r) in rho.iter().enumerate().skip(2) {
        let p = fit.coefficients.predict_cascade(i, 1.0, 7).clamp(0.0, 2.0);
        assert!((r - p).abs() < 1e-12);
    }
}
