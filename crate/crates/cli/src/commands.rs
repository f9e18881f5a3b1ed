use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;
use vinesim::engine::{launch_states, rollout_batch, EngineError, RolloutConfig};
use vinesim::fit::{fit_eps_crit, fit_eps_polynomial, fit_parameters, EpsFit, FitError, MomentDataset, OptimizerConfig, PolyFit, TrajectoryDataset};
use vinesim::io::{self, BenchRow};
use vinesim::qpdiff::QpDump;
use vinesim::stiffness::{wrinkle_angle, wrinkling_magnitude, NeuralStiffnessParams, Stiffness, WrinklingParams};
use vinesim::{presets, rng, PhysParams, Scene};

use crate::manifest::{sibling, RunManifest};
use crate::{BenchArgs, Command, FitArgs, FitEpsilonArgs, Model, RolloutArgs, StiffnessTableArgs};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Engine(String),
    Insufficient(String),
    Diverged(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Engine(_) => 3,
            CliError::Insufficient(_) => 4,
            CliError::Diverged(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Engine(m) => write!(f, "engine failure: {m}"),
            CliError::Insufficient(m) => write!(f, "insufficient data: {m}"),
            CliError::Diverged(m) => write!(f, "optimization diverged: {m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn output_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Input(format!("cannot write {}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{what} {}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| output_err(path, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, run: &mut RunManifest) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| output_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| output_err(path, e))?;
    run.output(path);
    Ok(())
}

fn create(path: &Path, run: &mut RunManifest) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| output_err(path, e))?;
    run.output(path);
    Ok(BufWriter::new(f))
}

/// Writes the failing QP next to `out` and turns the failure into an engine error.
fn engine_failure(err: EngineError, out: &Path, run: &mut RunManifest) -> CliError {
    match err {
        EngineError::Step { step, reason, dump } => {
            let path = sibling(out, "qpdump.json");
            let dumped = std::fs::write(&path, dump_text(&dump)).is_ok();
            let mut msg = format!("step {step}: {reason}");
            if dumped {
                msg.push_str(&format!(" (QP dump: {})", path.display()));
                run.qp_dump = Some(path);
            }
            CliError::Engine(msg)
        }
        EngineError::Invalid(m) => CliError::Input(m),
    }
}

fn dump_text(dump: &QpDump) -> String {
    dump.to_json()
}

pub fn run(cmd: &Command, seed: u64, workers: Option<usize>, run: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Rollout(a) => rollout(a, seed, workers, run),
        Command::Bench(a) => bench(a, seed, workers, run),
        Command::StiffnessTable(a) => stiffness_table(a, run),
        Command::FitEpsilon(a) => fit_epsilon(a, run),
        Command::Fit(a) => fit(a, seed, run),
    }
}

fn load_params(path: &Path, max_links: usize) -> Result<PhysParams> {
    let p: PhysParams = read_json(path, "params file")?;
    p.validate(max_links).map_err(|e| CliError::Input(format!("params file {}: {e}", path.display())))?;
    Ok(p)
}

fn rollout(a: &RolloutArgs, seed: u64, workers: Option<usize>, run: &mut RunManifest) -> Result<()> {
    let scene: Scene = read_json(&a.scene, "scene file")?;
    let params = load_params(&a.params, a.max_links)?;
    let [lo, hi] = [a.angle_range[0], a.angle_range[1]];
    if !(lo <= hi) {
        return Err(input("--angle-range needs low <= high"));
    }
    if a.batch < 1 || a.initial_links < 2 || a.initial_links > a.max_links {
        return Err(input("need --batch >= 1 and 2 <= --initial-links <= --max-links"));
    }
    if !(a.tip_fraction > 0.0 && a.tip_fraction <= 1.0) {
        return Err(input("--tip-fraction must lie in (0, 1]"));
    }
    let d = params.d_segment_m;
    let states = launch_states(scene.base, a.initial_links, d, a.tip_fraction * d, a.max_links, a.batch, seed, [lo, hi])
        .map_err(|e| engine_failure(e, &a.out, run))?;
    let config = RolloutConfig {
        steps: a.steps,
        dt: a.dt,
        batch: a.batch,
        max_links: a.max_links,
        seed,
        record_every: a.record_every,
        insert_links: true,
    };
    let result = run
        .time("rollout", || rollout_batch(&states, &[params], &scene, &config, workers))
        .map_err(|e| engine_failure(e, &a.out, run))?;

    let mut w = io::trajectory_writer(create(&a.out, run)?).map_err(|e| output_err(&a.out, e))?;
    let mut failure = None;
    for (trial, t) in result.trajectories.into_iter().enumerate() {
        match t {
            Ok(t) => io::write_trajectory(&mut w, trial, &t).map_err(|e| output_err(&a.out, e))?,
            Err(e) => {
                if failure.is_none() {
                    failure = Some((trial, e));
                }
            }
        }
    }
    w.flush().map_err(|e| output_err(&a.out, e))?;
    match failure {
        Some((trial, e)) => match engine_failure(e, &a.out, run) {
            CliError::Engine(m) => Err(CliError::Engine(format!("trial {trial}: {m}"))),
            other => Err(other),
        },
        None => Ok(()),
    }
}

fn bench(a: &BenchArgs, seed: u64, workers: Option<usize>, run: &mut RunManifest) -> Result<()> {
    let scene = match &a.scene {
        Some(p) => read_json(p, "scene file")?,
        None => presets::scene("clutter").expect("preset scene"),
    };
    let max_cap = a.max_links.iter().copied().max().unwrap_or(2);
    let params = match &a.params {
        Some(p) => load_params(p, max_cap)?,
        None => presets::reference_params(),
    };
    if a.max_links.iter().any(|&m| m < 3) || a.batch.iter().any(|&b| b < 1) || a.repeats < 1 {
        return Err(input("need every --max-links >= 3, every --batch >= 1 and --repeats >= 1"));
    }
    let d = params.d_segment_m;
    let mut rows = Vec::new();
    for &max_links in &a.max_links {
        for &batch in &a.batch {
            let mut total = 0.0;
            for rep in 0..a.repeats {
                let rep_seed = seed.wrapping_add(rep as u64);
                let states = launch_states(scene.base, 3, d, 0.2 * d, max_links, batch, rep_seed, [-0.3, 0.3])
                    .map_err(|e| engine_failure(e, &a.out, run))?;
                let config = RolloutConfig {
                    steps: a.steps,
                    batch,
                    max_links,
                    seed: rep_seed,
                    ..Default::default()
                };
                let r = rollout_batch(&states, std::slice::from_ref(&params), &scene, &config, workers)
                    .map_err(|e| engine_failure(e, &a.out, run))?;
                if let Some(e) = r.trajectories.iter().position(|t| t.is_err()) {
                    let err = r.trajectories.into_iter().nth(e).expect("index").unwrap_err();
                    return Err(engine_failure(err, &a.out, run));
                }
                total += r.mean_iteration_ms();
            }
            let mean = total / a.repeats as f64;
            rows.push(BenchRow {
                max_links,
                batch,
                mean_ms_per_iteration: mean,
                ms_per_iteration_per_element: mean / batch as f64,
            });
        }
    }
    let w = create(&a.out, run)?;
    io::write_bench(w, &rows).map_err(|e| output_err(&a.out, e))
}

fn stiffness_table(a: &StiffnessTableArgs, run: &mut RunManifest) -> Result<()> {
    if !(a.pressure > 0.0 && a.pressure.is_finite() && a.radius > 0.0 && a.radius.is_finite()) {
        return Err(input("--pressure and --radius must be > 0"));
    }
    if a.points < 2 {
        return Err(input("--points must be >= 2"));
    }
    let eps: Vec<f64> = match &a.poly {
        Some(c) if c.len() != 4 => return Err(input("--poly needs four coefficients c0,c1,c2,c3")),
        Some(c) => vec![c[0] + a.pressure * (c[1] + a.pressure * (c[2] + a.pressure * c[3]))],
        None => a.eps.clone(),
    };
    if let Some(e) = eps.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(input(format!("wrinkling criterion {e} outside (0, 1)")));
    }
    let full = PI * a.pressure * a.radius.powi(3);
    let mut w = csv_writer(create(&a.out, run)?);
    w.write_record(["eps_crit", "theta_rad", "gamma0_rad", "moment_ratio", "moment_nm"])
        .map_err(|e| output_err(&a.out, e))?;
    for &e in &eps {
        for i in 0..a.points {
            let theta = PI * i as f64 / (a.points - 1) as f64;
            let gamma = wrinkle_angle(theta, e).map_err(input)?;
            let ratio = wrinkling_magnitude(theta, 1.0, e);
            w.write_record([e.to_string(), theta.to_string(), gamma.to_string(), ratio.to_string(), (ratio * full).to_string()])
                .map_err(|err| output_err(&a.out, err))?;
        }
    }
    w.flush().map_err(|e| output_err(&a.out, e))
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum GroupResult {
    Fitted(EpsFit),
    Failed { pressure_pa: f64, samples: usize, error: String },
}

#[derive(Debug, Serialize)]
struct EpsilonReport {
    tube_radius_m: f64,
    groups: Vec<GroupResult>,
    polynomial: Option<PolyFit>,
    calibrated_range_pa: Option<[f64; 2]>,
}

fn fit_epsilon(a: &FitEpsilonArgs, run: &mut RunManifest) -> Result<()> {
    if !(a.radius > 0.0 && a.radius.is_finite()) {
        return Err(input("--radius must be > 0"));
    }
    let file = File::open(&a.moments).map_err(|e| CliError::Input(format!("cannot read moments file {}: {e}", a.moments.display())))?;
    let data = MomentDataset::from_csv(file, &a.moments.display().to_string()).map_err(input)?;
    let mut groups = Vec::new();
    let mut pairs = Vec::new();
    for (p, g) in data.groups() {
        match fit_eps_crit(&g, a.radius) {
            Ok(fit) => {
                pairs.push((p, fit.eps_crit));
                groups.push(GroupResult::Fitted(fit));
            }
            Err(e) => groups.push(GroupResult::Failed {
                pressure_pa: p,
                samples: g.len(),
                error: e.to_string(),
            }),
        }
    }
    let polynomial = if pairs.len() >= 4 {
        Some(fit_eps_polynomial(&pairs).map_err(|e| CliError::Insufficient(e.to_string()))?)
    } else {
        None
    };
    let calibrated_range_pa = match (pairs.first(), pairs.last()) {
        (Some(lo), Some(hi)) => Some([lo.0, hi.0]),
        _ => None,
    };
    let report = EpsilonReport {
        tube_radius_m: a.radius,
        groups,
        polynomial,
        calibrated_range_pa,
    };
    write_json(&a.out, &report, run)?;
    if report.polynomial.is_none() {
        return Err(CliError::Insufficient(format!(
            "{} pressure groups fitted, a cubic needs 4",
            pairs.len()
        )));
    }
    Ok(())
}

fn fit(a: &FitArgs, seed: u64, run: &mut RunManifest) -> Result<()> {
    let dataset = TrajectoryDataset::load(&a.manifest).map_err(input)?;
    let first = dataset
        .trials
        .first()
        .ok_or_else(|| CliError::Insufficient("dataset lists no trials".into()))?;
    let mut params = match &a.params {
        Some(p) => read_json::<PhysParams>(p, "params file")?,
        None => PhysParams {
            d_segment_m: first.d_segment,
            dt_s: first.frame_interval,
            ..presets::reference_params()
        },
    };
    params.stiffness = match (a.model, &params.stiffness) {
        (Model::Linear, s @ Stiffness::Linear(_)) => s.clone(),
        (Model::Linear, _) => Stiffness::linear(1.0),
        (Model::Wrinkling, Stiffness::Wrinkling(w)) => Stiffness::Wrinkling(WrinklingParams {
            pressure_pa: a.pressure.unwrap_or(w.pressure_pa),
            tube_radius_m: a.radius.unwrap_or(w.tube_radius_m),
            ..w.clone()
        }),
        (Model::Wrinkling, _) => match (a.pressure, a.radius) {
            (Some(p), Some(r)) => Stiffness::wrinkling_fixed(p, r, 0.1),
            _ => return Err(input("starting a wrinkling fit from another model needs --pressure and --radius")),
        },
        (Model::Mlp, s @ Stiffness::Mlp(_)) => s.clone(),
        (Model::Mlp, _) => Stiffness::Mlp(NeuralStiffnessParams::init(rng::stream(seed, "mlp-init", 0).gen())),
    };
    let defaults = OptimizerConfig::default();
    let config = OptimizerConfig {
        iterations: a.iters,
        lr_physical: a.lr_physical.unwrap_or(defaults.lr_physical),
        lr_neural: a.lr_neural.unwrap_or(defaults.lr_neural),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        free_velocities: a.free_velocities,
        ..defaults
    };
    let report = run.time("fit", || fit_parameters(&dataset, &params, &config)).map_err(|e| match e {
        FitError::Engine(e) => engine_failure(e, &a.out, run),
        FitError::Uninformative(m) => CliError::Insufficient(m),
        other => input(other),
    })?;
    write_json(&a.out, &report, run)?;
    let params_path = sibling(&a.out, "params.json");
    write_json(&params_path, &report.params, run)?;
    if report.diverged {
        return Err(CliError::Diverged(format!(
            "loss stayed above {}x the initial value; best parameters written",
            config.divergence_factor
        )));
    }
    Ok(())
}
