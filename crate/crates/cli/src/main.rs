//! Command-line front end: search, sample, fit-cpr, eval, order-check and
//! serve-check.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dc_solver::config::{ModelKind, RunConfig, SamplerSpec};
use dc_solver::cpr::{cpr_fit, CprCoefficients};
use dc_solver::dc::{CompensationSchedule, ScheduleMeta};
use dc_solver::eval::{
    endpoint_errors, fit_cpr_by_search, initial_noise, order_slope, run_experiment, search_schedule, NOISE_GENERATOR,
};
use dc_solver::model::{DenoisingModel, Parameterization, RemoteDenoiser};
use dc_solver::solver::{Sampler, SamplerConfig};
use serde_json::json;

const SAMPLE_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "dc-solver",
    version,
    about = "Diffusion ODE sampling with dynamic compensation",
    after_help = "Any config key can be overridden with a dotted flag, e.g. `--dc.lr 0.05 --grid.nfe 8`."
)]
struct Cli {
    /// Worker threads; DC_SOLVER_JOBS takes precedence. Defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DcArg {
    /// Plain sampler, no compensation.
    Off,
    /// Search a schedule on the search seeds first, then sample with it.
    Search,
}

#[derive(Subcommand)]
enum Command {
    /// Search compensation ratios for `grid.nfe` at `model.cfg_scale`.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output schedule file; defaults to a name under `output.dir`.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Sample trajectories, written as JSON lines after a header line.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Compensation schedule file from `search`.
        #[arg(long, conflicts_with_all = ["cpr_file", "dc"])]
        rho_file: Option<PathBuf>,
        /// Regression coefficients from `fit-cpr`; ratios are predicted for
        /// `grid.nfe` and `model.cfg_scale`.
        #[arg(long, conflicts_with = "dc")]
        cpr_file: Option<PathBuf>,
        #[arg(long, value_enum)]
        dc: Option<DcArg>,
        /// First noise seed; defaults to `eval.seed_start`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// Write only the endpoints instead of every step.
        #[arg(long)]
        endpoints: bool,
        /// Output file; standard output when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Fit regression coefficients to schedule files, or to schedules
    /// searched on the `cpr` training grid when no files are given.
    FitCpr {
        #[command(flatten)]
        cfg: ConfigArgs,
        schedules: Vec<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the experiment grid and write CSV and JSON reports.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report directory; defaults to `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        stem: String,
    },
    /// Empirical convergence order of each sampler over `eval.order_nfes`.
    OrderCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of noise seeds.
        #[arg(long, default_value_t = 8)]
        count: u64,
    },
    /// Ping a remote denoiser and optionally compare it with the configured
    /// analytic mixture.
    ServeCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `host:port`; defaults to `model.address`.
        #[arg(long)]
        address: Option<String>,
        /// Served dimension; defaults to the config's dimension.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value = "eps")]
        param: String,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Compare against the config's mixture evaluated in process.
        #[arg(long)]
        compare: bool,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

/// Splits `--a.b value` and `--a.b=value` pairs out of the arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("override --{key} needs a value"))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let config = match &args.config {
        Some(p) => RunConfig::load(p, overrides).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::from_toml_str("", overrides)?,
    };
    Ok(config)
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let jobs = match std::env::var("DC_SOLVER_JOBS") {
        Ok(v) => Some(v.parse::<usize>().with_context(|| format!("DC_SOLVER_JOBS={v:?} is not a count"))?),
        Err(_) => flag,
    };
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_search(config: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let spec = config.sampler;
    let (nfe, cfg) = (config.grid.nfe, config.model.cfg_scale);
    let (schedule, report) = search_schedule(config, &spec, nfe, cfg)?;
    let path = out.unwrap_or_else(|| {
        config
            .output
            .dir
            .join(format!("rho_o{}{}_nfe{nfe}_cfg{cfg}.json", spec.order, if spec.corrector { "pc" } else { "p" }))
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    schedule.save(&path, Some(config.to_json_value()))?;
    println!("step\trho\tloss_at_1\tloss_at_rho");
    for s in &report.steps {
        println!("{}\t{:.6}\t{:.6e}\t{:.6e}", s.i, s.rho, s.loss_at_one, s.loss_at_best);
    }
    eprintln!(
        "search endpoint mse {:.6e} (rho = 1: {:.6e}); wrote {}",
        report.endpoint_mse_searched,
        report.endpoint_mse_baseline,
        path.display()
    );
    Ok(())
}

struct SampleArgs {
    rho_file: Option<PathBuf>,
    cpr_file: Option<PathBuf>,
    dc: Option<DcArg>,
    seed: Option<u64>,
    count: u64,
    endpoints: bool,
    out: Option<PathBuf>,
}

fn resolve_schedule(config: &RunConfig, sc: &SamplerConfig<f64>, a: &SampleArgs) -> Result<Option<CompensationSchedule<f64>>> {
    let meta = ScheduleMeta::for_sampler(sc, config.model.cfg_scale);
    if let Some(p) = &a.rho_file {
        let s = CompensationSchedule::load(p).with_context(|| format!("loading {}", p.display()))?;
        if s.meta != meta {
            eprintln!("warning: {} was searched for {:?}, sampling with {:?}", p.display(), s.meta, meta);
        }
        return Ok(Some(s));
    }
    if let Some(p) = &a.cpr_file {
        let c = CprCoefficients::<f64>::load(p).with_context(|| format!("loading {}", p.display()))?;
        return Ok(Some(c.predict_schedule(meta, config.dc.k, config.dc.rho_min, config.dc.rho_max)?));
    }
    match a.dc {
        Some(DcArg::Search) => Ok(Some(search_schedule(config, &config.sampler, sc.nfe(), config.model.cfg_scale)?.0)),
        Some(DcArg::Off) | None => Ok(None),
    }
}

fn cmd_sample(config: &RunConfig, a: SampleArgs) -> Result<()> {
    let sc = config.sampler_config(&config.sampler, config.grid.nfe)?;
    let schedule = resolve_schedule(config, &sc, &a)?;
    let model = config.build_model(config.model.cfg_scale)?;
    let sampler = Sampler::new(&*model, &sc).with_compensation_order(config.dc.k);
    let first = a.seed.unwrap_or(config.eval.seed_start);

    let mut w = output(a.out.as_deref())?;
    let header = json!({
        "format_version": SAMPLE_FORMAT_VERSION,
        "noise_generator": NOISE_GENERATOR,
        "seeds": [first, first + a.count],
        "rho": schedule.as_ref().map(|s| s.rho.clone()),
        "config": config.to_json_value(),
    });
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for seed in first..first + a.count {
        let x = initial_noise(seed, config.dim());
        let mut traj = sampler.sample(&x, schedule.as_ref()).with_context(|| format!("seed {seed}"))?;
        traj.seed = Some(seed);
        if a.endpoints {
            serde_json::to_writer(&mut w, &json!({"seed": seed, "x": traj.endpoint(), "nfe_used": traj.nfe_used}))?;
            w.write_all(b"\n")?;
        } else {
            traj.write_jsonl(&mut w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_fit_cpr(config: &RunConfig, files: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let fit = if files.is_empty() {
        eprintln!(
            "searching {} training configurations",
            config.cpr.train_cfg.len() * config.cpr.train_nfe.len()
        );
        fit_cpr_by_search(config, &config.sampler)?.0
    } else {
        let schedules = files
            .iter()
            .map(|p| CompensationSchedule::load(p).with_context(|| format!("loading {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        cpr_fit(&schedules, config.cpr.degrees())?
    };
    let path = out.unwrap_or_else(|| config.output.dir.join("cpr.json"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    fit.coefficients.save(&path, Some(config.to_json_value()))?;
    println!(
        "fitted {} samples: residual rms {:.3e}, max {:.3e}; wrote {}",
        fit.n_samples,
        fit.residual_rms,
        fit.residual_max,
        path.display()
    );
    Ok(())
}

fn cmd_eval(config: &RunConfig, out_dir: Option<PathBuf>, stem: &str) -> Result<()> {
    let report = run_experiment(config)?;
    let dir = out_dir.unwrap_or_else(|| config.output.dir.clone());
    let (csv, json) = report.write(&dir, stem)?;
    print!("{}", report.to_csv()?);
    eprintln!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn cmd_order_check(config: &RunConfig, count: u64) -> Result<()> {
    let nfes = &config.eval.order_nfes;
    let model = config.build_model(config.model.cfg_scale)?;
    let schedule = config.noise_schedule()?;
    let first = config.eval.seed_start;
    let x_inits: Vec<Vec<f64>> = (first..first + count).map(|s| initial_noise(s, config.dim())).collect();

    // closed form for a single Gaussian, otherwise a much finer third-order run
    let single = config.model.kind == ModelKind::Gmm && config.model.means.len() == 1;
    let reference: Vec<Vec<f64>> = if single {
        let m = config.mixture()?;
        x_inits
            .iter()
            .map(|x| m.flow_solution(x, schedule.t_start, schedule.t_end))
            .collect::<dc_solver::Result<_>>()?
    } else {
        let fine = 16 * nfes.iter().max().copied().unwrap_or(64);
        let spec = SamplerSpec {
            order: 3,
            corrector: true,
            ..config.sampler
        };
        let sc = config.sampler_config(&spec, fine)?;
        let sampler = Sampler::new(&*model, &sc);
        x_inits
            .iter()
            .map(|x| sampler.sample(x, None).map(|t| t.endpoint().to_vec()))
            .collect::<dc_solver::Result<_>>()?
    };
    println!(
        "reference: {}",
        if single { "closed form" } else { "order-3 predictor-corrector at 16x the largest NFE" }
    );

    print!("sampler\torder");
    for n in nfes {
        print!("\tnfe{n}");
    }
    println!("\tslope");
    for corrector in [false, true] {
        for order in 1..=3 {
            let spec = SamplerSpec {
                order,
                corrector,
                ..config.sampler
            };
            let errs = endpoint_errors(&*model, None, |nfe| config.sampler_config(&spec, nfe), nfes, &x_inits, &reference)?;
            let slope = order_slope(&errs, nfes)?;
            print!("{}\t{order}", spec.name());
            for e in &errs {
                print!("\t{e:.3e}");
            }
            println!("\t{slope:.3}");
        }
    }
    Ok(())
}

struct ServeArgs {
    address: Option<String>,
    dim: Option<usize>,
    param: String,
    batch: usize,
    compare: bool,
    tol: f64,
}

fn cmd_serve_check(config: &RunConfig, a: ServeArgs) -> Result<()> {
    let address = a
        .address
        .or_else(|| config.model.address.clone())
        .context("no address: pass --address or set model.address")?;
    let dim = a.dim.unwrap_or(config.dim());
    let param = Parameterization::from_wire_name(&a.param).with_context(|| format!("unknown param {:?}", a.param))?;
    let remote = RemoteDenoiser::connect(address.as_str(), dim, param)?;
    let xs: Vec<Vec<f64>> = (0..a.batch as u64).map(|s| initial_noise(s, dim)).collect();
    let mut worst: f64 = 0.0;
    for t in [0.9, 0.5, 0.1] {
        let clock = Instant::now();
        let outs = remote.evaluate_batch(&xs, t, config.model.cond)?;
        println!(
            "t={t}: {} rows of dim {dim} in {} ({:.2} ms)",
            outs.len(),
            outs[0].param.wire_name(),
            clock.elapsed().as_secs_f64() * 1e3
        );
        if a.compare {
            let mut local = config.clone();
            local.model.kind = ModelKind::Gmm;
            let m = local.mixture()?;
            for (x, o) in xs.iter().zip(&outs) {
                let l = m.evaluate(x, t, config.model.cond)?;
                let l = dc_solver::model::convert(&l, x, m.schedule(), o.param)?;
                for (u, v) in o.value.iter().zip(&l.value) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    if a.compare {
        println!("max abs difference to the in-process mixture: {worst:.3e}");
        if !(worst <= a.tol) {
            bail!("remote output differs from the in-process mixture by {worst:.3e} > {}", a.tol);
        }
    }
    Ok(())
}

fn run() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    configure_threads(cli.jobs)?;
    match cli.command {
        Command::Search { cfg, out } => cmd_search(&load_config(&cfg, &overrides)?, out),
        Command::Sample {
            cfg,
            rho_file,
            cpr_file,
            dc,
            seed,
            count,
            endpoints,
            out,
        } => cmd_sample(
            &load_config(&cfg, &overrides)?,
            SampleArgs {
                rho_file,
                cpr_file,
                dc,
                seed,
                count,
                endpoints,
                out,
            },
        ),
        Command::FitCpr { cfg, schedules, out } => cmd_fit_cpr(&load_config(&cfg, &overrides)?, &schedules, out),
        Command::Eval { cfg, out_dir, stem } => cmd_eval(&load_config(&cfg, &overrides)?, out_dir, &stem),
        Command::OrderCheck { cfg, count } => cmd_order_check(&load_config(&cfg, &overrides)?, count),
        Command::ServeCheck {
            cfg,
            address,
            dim,
            param,
            batch,
            compare,
            tol,
        } => cmd_serve_check(
            &load_config(&cfg, &overrides)?,
            ServeArgs {
                address,
                dim,
                param,
                batch,
                compare,
                tol,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
