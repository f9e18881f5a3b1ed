//! `vinesim` command-line driver.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "vinesim", version, about = "Differentiable vine-robot simulator")]
struct Cli {
    /// Seed for every random draw (launch angles, network initialisation).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for batched rollouts; defaults to VINESIM_WORKERS or all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run manifest path; defaults to `<out>.manifest.json`.
    #[arg(long, global = true)]
    run_manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Roll out a batch of vines from random launch angles and write their trajectories.
    Rollout(RolloutArgs),
    /// Time batched rollouts over a grid of link capacities and batch sizes.
    Bench(BenchArgs),
    /// Tabulate the normalised wrinkling moment against bending angle.
    StiffnessTable(StiffnessTableArgs),
    /// Fit the wrinkling criterion per pressure and a cubic in pressure.
    FitEpsilon(FitEpsilonArgs),
    /// Fit simulator parameters to tracked trajectories.
    Fit(FitArgs),
}

#[derive(Debug, Args, Serialize)]
struct RolloutArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 40)]
    max_links: usize,
    /// Links at launch (including the base and tip).
    #[arg(long, default_value_t = 3)]
    initial_links: usize,
    /// Tip length at launch, as a fraction of the link spacing.
    #[arg(long, default_value_t = 0.2)]
    tip_fraction: f64,
    /// Launch heading offsets are drawn uniformly from this range (rad).
    #[arg(long, num_args = 2, allow_hyphen_values = true, default_values_t = [-0.3, 0.3])]
    angle_range: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    /// Overrides the params file's time step.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10, 40])]
    max_links: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 64])]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Rollouts averaged per grid point.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Scene file; the built-in cluttered scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Params file; the reference vine when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct StiffnessTableArgs {
    #[arg(long)]
    pressure: f64,
    #[arg(long)]
    radius: f64,
    /// Criteria to tabulate.
    #[arg(long, value_delimiter = ',', required_unless_present = "poly", conflicts_with = "poly", allow_hyphen_values = true)]
    eps: Vec<f64>,
    /// Cubic `c0,c1,c2,c3` giving the criterion at `--pressure`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    poly: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FitEpsilonArgs {
    #[arg(long)]
    moments: PathBuf,
    #[arg(long)]
    radius: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Model {
    Linear,
    Mlp,
    Wrinkling,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    /// Dataset manifest listing trials, scenes and frame intervals.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    model: Model,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Starting parameters; the reference vine (with the dataset's spacing) when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Tube pressure for a wrinkling start when the params file has another model.
    #[arg(long)]
    pressure: Option<f64>,
    /// Tube radius for a wrinkling start when the params file has another model.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    lr_physical: Option<f64>,
    #[arg(long)]
    lr_neural: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Fit per-frame initial velocities as free variables.
    #[arg(long)]
    free_velocities: bool,
    #[arg(long)]
    out: PathBuf,
}

impl Command {
    fn out(&self) -> &PathBuf {
        match self {
            Command::Rollout(a) => &a.out,
            Command::Bench(a) => &a.out,
            Command::StiffnessTable(a) => &a.out,
            Command::FitEpsilon(a) => &a.out,
            Command::Fit(a) => &a.out,
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Rollout(a) => vec![a.scene.clone(), a.params.clone()],
            Command::Bench(a) => a.scene.iter().chain(&a.params).cloned().collect(),
            Command::StiffnessTable(_) => Vec::new(),
            Command::FitEpsilon(a) => vec![a.moments.clone()],
            Command::Fit(a) => std::iter::once(a.manifest.clone()).chain(a.params.clone()).collect(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let manifest_path = cli
        .run_manifest
        .clone()
        .unwrap_or_else(|| manifest::sibling(cli.command.out(), "manifest.json"));
    let mut run = RunManifest::start(&cli.command, cli.seed, cli.workers, &cli.command.inputs());
    let result = commands::run(&cli.command, cli.seed, cli.workers, &mut run);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    };
    run.finish(code, result.err().map(|e| e.to_string()));
    if let Err(e) = run.write(&manifest_path) {
        eprintln!("error: cannot write manifest {}: {e}", manifest_path.display());
        return ExitCode::from(if code == 0 { 2 } else { code as u8 });
    }
    ExitCode::from(code as u8)
}
