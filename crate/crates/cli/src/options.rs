//! Command-line flags and config files.
//!
//! Each subcommand's options live in one struct that is both the clap
//! argument set and the TOML config schema: every long flag `--foo-bar` is
//! the config key `foo-bar` and vice versa (`--config` itself excepted).
//! Values given on the command line override the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use piano_core::ablation::ExperimentSpec;
use piano_core::bench::ProblemKind;
use piano_core::model::Backbone;
use piano_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::io::GridFormat;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "piano", version, about = "Physics-informed autoregressive PDE solving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on one benchmark problem.
    Train(WithConfig<TrainArgs>),
    /// Evaluate a checkpoint (or a given field) against the exact solution.
    Eval(WithConfig<EvalArgs>),
    /// Check the error-propagation bound step by step.
    Diagnose(WithConfig<DiagnoseArgs>),
    /// Train and evaluate an experiment matrix over several seeds.
    Ablate(WithConfig<AblateArgs>),
}

#[derive(Debug, Args)]
pub struct WithConfig<T: Args> {
    /// TOML file whose keys are the long flag names; flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub args: T,
}

/// Merges file values under command-line values.
pub trait Layered: Sized + for<'de> Deserialize<'de> {
    fn or(self, file: Self) -> Self;
}

macro_rules! layered {
    ($t:ty { $($f:ident),* $(,)? }) => {
        impl Layered for $t {
            fn or(self, file: Self) -> Self {
                Self { $($f: self.$f.or(file.$f)),* }
            }
        }
    };
}

impl<T: Args + Layered> WithConfig<T> {
    /// Command-line values layered over the config file, if any.
    pub fn resolve(self) -> Result<T, CliError> {
        match &self.config {
            None => Ok(self.args),
            Some(path) => Ok(self.args.or(load_toml(path)?)),
        }
    }
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// Benchmark problem: wave, reaction, convection or heat.
    #[arg(long)]
    pub problem: Option<ProblemKind>,
    /// Backbone: ssm, gru, mlp or non-ar. [default: ssm]
    #[arg(long)]
    pub backbone: Option<Backbone>,
    /// State dimension. [default: 64]
    #[arg(long)]
    pub k: Option<usize>,
    /// Spatial nodes. [default: 50]
    #[arg(long)]
    pub nx: Option<usize>,
    /// Time steps (the grid has steps + 1 time nodes). [default: 50]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training iterations. [default: 20000]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Initial learning rate. [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Final learning rate of the cosine schedule. [default: 0]
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Decoupled weight decay. [default: 1e-4]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm clipping threshold. [default: 1]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Weight of the interior residual energy. [default: 1]
    #[arg(long)]
    pub lambda_interior: Option<f64>,
    /// Weight of the boundary residual energy. [default: 1]
    #[arg(long)]
    pub lambda_boundary: Option<f64>,
    /// Seed for initialization and batch sampling. [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Spatial nodes per iteration in the loss. [default: all]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Accuracy order of first-derivative stencils, 1 or 2. [default: 2]
    #[arg(long)]
    pub fd_order: Option<u8>,
    /// Comma-separated training percentages at which rollouts are saved.
    /// [default: 5,25,50,100]
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Option<Vec<f64>>,
    /// Output directory. [default: piano-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid CSV layout. [default: long]
    #[arg(long, value_enum)]
    pub grid_format: Option<GridFormat>,
    /// Log progress every N iterations (0 disables). [default: 500]
    #[arg(long)]
    pub log_every: Option<usize>,
}

layered!(TrainArgs {
    problem, backbone, k, nx, steps, iters, lr, lr_min, weight_decay, clip_norm,
    lambda_interior, lambda_boundary, seed, batch, fd_order, snapshots, out,
    grid_format, log_every,
});

/// Fully resolved training run.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub problem: ProblemKind,
    pub backbone: Backbone,
    pub k: usize,
    pub nx: usize,
    pub steps: usize,
    pub config: TrainConfig,
    pub out: PathBuf,
    pub grid_format: GridFormat,
    pub log_every: usize,
}

impl TrainArgs {
    pub fn plan(self) -> Result<TrainPlan, CliError> {
        let d = TrainConfig::default();
        let config = TrainConfig {
            iterations: self.iters.unwrap_or(d.iterations),
            lr: self.lr.unwrap_or(d.lr),
            lr_min: self.lr_min.unwrap_or(d.lr_min),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            lambda_interior: self.lambda_interior.unwrap_or(d.lambda_interior),
            lambda_boundary: self.lambda_boundary.unwrap_or(d.lambda_boundary),
            seed: self.seed.unwrap_or(d.seed),
            batch: self.batch.or(d.batch),
            fd_order: self.fd_order.unwrap_or(d.fd_order),
            snapshot_percents: self.snapshots.unwrap_or(d.snapshot_percents),
        };
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let plan = TrainPlan {
            problem: required(self.problem, "problem")?,
            backbone: self.backbone.unwrap_or(Backbone::Ssm),
            k: self.k.unwrap_or(64),
            nx: self.nx.unwrap_or(50),
            steps: self.steps.unwrap_or(50),
            config,
            out: self.out.unwrap_or_else(|| PathBuf::from("piano-out")),
            grid_format: self.grid_format.unwrap_or_default(),
            log_every: self.log_every.unwrap_or(500),
        };
        // Surface grid and model problems before any compute starts.
        plan.problem
            .problem()
            .residual_operator(
                &plan.problem.problem().grid(plan.nx, plan.steps).map_err(|e| CliError::Usage(e.to_string()))?,
                plan.config.accuracy().expect("validated"),
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
        piano_core::model::PianoModel::new(plan.backbone, plan.k, 0).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(plan)
    }
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate this grid CSV (on the evaluation grid) instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub field: Option<PathBuf>,
    /// Problem. [default: the checkpoint's]
    #[arg(long)]
    pub problem: Option<ProblemKind>,
    /// Training-grid spatial nodes. [default: the checkpoint's]
    #[arg(long)]
    pub nx: Option<usize>,
    /// Training-grid time steps. [default: the checkpoint's]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed recorded in the report. [default: the checkpoint's]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. [default: piano-eval]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid CSV layout. [default: long]
    #[arg(long, value_enum)]
    pub grid_format: Option<GridFormat>,
    /// Comma-separated spatial indices for a temporal-profile CSV.
    #[arg(long, value_delimiter = ',')]
    pub profile: Option<Vec<usize>>,
}

layered!(EvalArgs { checkpoint, field, problem, nx, steps, seed, out, grid_format, profile });

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DiagnoseArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Diagnose this grid CSV (on the training grid) instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub field: Option<PathBuf>,
    /// Problem. [default: the checkpoint's]
    #[arg(long)]
    pub problem: Option<ProblemKind>,
    /// Spatial nodes. [default: the checkpoint's]
    #[arg(long)]
    pub nx: Option<usize>,
    /// Time steps. [default: the checkpoint's]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory. [default: piano-diagnose]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(DiagnoseArgs { checkpoint, field, problem, nx, steps, out });

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct AblateArgs {
    /// Matrix cell `problem/backbone/fdN/kN/NXxM`, e.g.
    /// `reaction/ssm/fd2/k64/50x50`; repeatable or comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub cell: Option<Vec<String>>,
    /// Use the default desk-scale reaction matrix.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub desk: Option<bool>,
    /// Iterations per run. [default: 20000]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Comma-separated seeds. [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Initial learning rate. [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay. [default: 1e-4]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Output directory. [default: piano-ablate]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(AblateArgs { cell, desk, iters, seeds, lr, weight_decay, out });

#[derive(Debug, Clone)]
pub struct AblatePlan {
    pub specs: Vec<ExperimentSpec>,
    pub base: TrainConfig,
    pub out: PathBuf,
}

/// Parses `problem/backbone/fdN/kN/NXxM`.
pub fn parse_cell(s: &str, iterations: usize, seeds: &[u64]) -> Result<ExperimentSpec, CliError> {
    let bad = || CliError::Usage(format!("bad cell {s:?}; expected problem/backbone/fdN/kN/NXxM"));
    let parts: Vec<&str> = s.trim().split('/').collect();
    let [problem, backbone, fd, k, grid] = parts[..] else {
        return Err(bad());
    };
    let (nx, steps) = grid.split_once('x').ok_or_else(bad)?;
    Ok(ExperimentSpec {
        problem: problem.parse().map_err(|_| bad())?,
        backbone: backbone.parse().map_err(|_| bad())?,
        fd_order: fd.strip_prefix("fd").and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        k: k.strip_prefix('k').and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        nx: nx.parse().map_err(|_| bad())?,
        steps: steps.parse().map_err(|_| bad())?,
        iterations,
        seeds: seeds.to_vec(),
    })
}

impl AblateArgs {
    pub fn plan(self) -> Result<AblatePlan, CliError> {
        let iterations = self.iters.unwrap_or(20_000);
        let seeds = self.seeds.unwrap_or_else(|| vec![0, 1, 2]);
        if seeds.is_empty() {
            return Err(CliError::Usage("--seeds is empty".into()));
        }
        let mut specs = if self.desk.unwrap_or(false) {
            piano_core::ablation::desk_matrix(iterations, &seeds)
        } else {
            Vec::new()
        };
        for c in self.cell.unwrap_or_default() {
            specs.push(parse_cell(&c, iterations, &seeds)?);
        }
        if specs.is_empty() {
            return Err(CliError::Usage(
                "experiment matrix is empty; pass --cell or --desk".into(),
            ));
        }
        for s in &specs {
            s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        let d = TrainConfig::default();
        let base = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            ..d
        };
        base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(AblatePlan {
            specs,
            base,
            out: self.out.unwrap_or_else(|| PathBuf::from("piano-ablate")),
        })
    }
}
