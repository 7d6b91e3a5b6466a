//! Experiment matrices: train and evaluate every cell over its seeds,
//! aggregate, and check the expected orderings between cells.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::ProblemKind;
use crate::metrics::{evaluate, MetricsError};
use crate::model::{Backbone, ModelError, PianoModel};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("experiment matrix is empty")]
    Empty,
    #[error("invalid cell {cell}: {reason}")]
    InvalidCell { cell: String, reason: String },
    #[error("missing result cell: {0}")]
    MissingCell(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One cell of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: ProblemKind,
    pub backbone: Backbone,
    pub fd_order: u8,
    pub k: usize,
    pub nx: usize,
    pub steps: usize,
    pub iterations: usize,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/fd{}/k{}/{}x{}",
            self.problem,
            self.backbone.name(),
            self.fd_order,
            self.k,
            self.nx,
            self.steps
        )
    }

    pub fn validate(&self) -> Result<(), AblationError> {
        let bad = |reason: &str| AblationError::InvalidCell {
            cell: self.label(),
            reason: reason.to_string(),
        };
        if self.seeds.is_empty() {
            return Err(bad("no seeds"));
        }
        if !matches!(self.fd_order, 1 | 2) {
            return Err(bad("fd_order must be 1 or 2"));
        }
        PianoModel::new(self.backbone, self.k, 0).map_err(|e| bad(&e.to_string()))?;
        self.problem
            .problem()
            .grid(self.nx, self.steps)
            .map_err(|e| bad(&e.to_string()))?;
        Ok(())
    }
}

/// The default desk-scale reaction matrix: four backbones at second-order
/// stencils plus the state-space backbone at first order.
pub fn desk_matrix(iterations: usize, seeds: &[u64]) -> Vec<ExperimentSpec> {
    let cell = |backbone, fd_order| ExperimentSpec {
        problem: ProblemKind::Reaction,
        backbone,
        fd_order,
        k: 64,
        nx: 50,
        steps: 50,
        iterations,
        seeds: seeds.to_vec(),
    };
    vec![
        cell(Backbone::NonAr, 2),
        cell(Backbone::Mlp, 2),
        cell(Backbone::Gru, 2),
        cell(Backbone::Ssm, 2),
        cell(Backbone::Ssm, 1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// `None` when training diverged.
    pub rmae: Option<f64>,
    pub rrmse: Option<f64>,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: ExperimentSpec,
    pub runs: Vec<RunResult>,
    pub rmae_mean: f64,
    pub rmae_std: f64,
    pub rrmse_mean: f64,
    pub rrmse_std: f64,
    pub diverged_count: usize,
}

/// Mean and sample standard deviation; the deviation of a single value is 0
/// and an empty input gives NaN for both.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl CellResult {
    pub fn from_runs(spec: ExperimentSpec, runs: Vec<RunResult>) -> Self {
        let ok: Vec<&RunResult> = runs.iter().filter(|r| r.diverged_at.is_none()).collect();
        let (rmae_mean, rmae_std) = mean_std(&ok.iter().filter_map(|r| r.rmae).collect::<Vec<_>>());
        let (rrmse_mean, rrmse_std) = mean_std(&ok.iter().filter_map(|r| r.rrmse).collect::<Vec<_>>());
        let diverged_count = runs.len() - ok.len();
        Self {
            spec,
            runs,
            rmae_mean,
            rmae_std,
            rrmse_mean,
            rrmse_std,
            diverged_count,
        }
    }
}

/// Trains and evaluates one seed of one cell.
pub fn run_cell_seed(spec: &ExperimentSpec, base: &TrainConfig, seed: u64) -> Result<RunResult, AblationError> {
    let problem = spec.problem.problem();
    let grid = problem.grid(spec.nx, spec.steps).map_err(TrainError::from)?;
    let model = PianoModel::new(spec.backbone, spec.k, seed)?;
    let cfg = TrainConfig {
        iterations: spec.iterations,
        fd_order: spec.fd_order,
        seed,
        snapshot_percents: Vec::new(),
        ..base.clone()
    };
    match train(&problem, &grid, &model, &cfg, |_| {}) {
        Ok(out) => {
            let ev = evaluate(&out.best, &problem, &grid, seed)?;
            Ok(RunResult {
                seed,
                rmae: Some(ev.report.rmae),
                rrmse: Some(ev.report.rrmse),
                diverged_at: None,
            })
        }
        Err(TrainError::Diverged { iteration, .. }) => Ok(RunResult {
            seed,
            rmae: None,
            rrmse: None,
            diverged_at: Some(iteration),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Runs every cell over its seeds. `on_run` sees each finished run.
pub fn run_matrix(
    specs: &[ExperimentSpec],
    base: &TrainConfig,
    mut on_run: impl FnMut(&ExperimentSpec, &RunResult),
) -> Result<Vec<CellResult>, AblationError> {
    if specs.is_empty() {
        return Err(AblationError::Empty);
    }
    for s in specs {
        s.validate()?;
    }
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut runs = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let r = run_cell_seed(spec, base, seed)?;
            on_run(spec, &r);
            runs.push(r);
        }
        out.push(CellResult::from_runs(spec.clone(), runs));
    }
    Ok(out)
}

pub const CSV_HEADER: &str =
    "problem,backbone,fd_order,k,Nx,M,seed_count,rmae_mean,rmae_std,rrmse_mean,rrmse_std,diverged_count";

pub fn results_csv(results: &[CellResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        let p = &r.spec;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            p.problem,
            p.backbone.name(),
            p.fd_order,
            p.k,
            p.nx,
            p.steps,
            p.seeds.len(),
            r.rmae_mean,
            r.rmae_std,
            r.rrmse_mean,
            r.rrmse_std,
            r.diverged_count
        );
    }
    s
}

/// Relation expected between two cells' mean rRMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    /// `left > right`
    Greater,
    /// `left ≥ right`
    AtLeast,
    /// `left > factor · right`
    Exceeds(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub left: f64,
    pub right: f64,
    pub relation: Relation,
    /// Positive when satisfied with room to spare, zero on a tie.
    pub margin: f64,
    pub pass: bool,
}

fn compare(name: String, left: f64, right: f64, relation: Relation) -> OrderingCheck {
    let (margin, pass) = match relation {
        Relation::Greater => (left - right, left > right),
        Relation::AtLeast => (left - right, left >= right),
        Relation::Exceeds(f) => {
            let m = left - f as f64 * right;
            (m, m > 0.0)
        }
    };
    OrderingCheck {
        name,
        left,
        right,
        relation,
        margin,
        pass: pass && left.is_finite() && right.is_finite(),
    }
}

fn find<'a>(
    results: &'a [CellResult],
    reference: &ExperimentSpec,
    backbone: Backbone,
    fd_order: u8,
) -> Result<&'a CellResult, AblationError> {
    results
        .iter()
        .find(|r| {
            let s = &r.spec;
            s.problem == reference.problem
                && s.k == reference.k
                && s.nx == reference.nx
                && s.steps == reference.steps
                && s.backbone == backbone
                && s.fd_order == fd_order
        })
        .ok_or_else(|| {
            AblationError::MissingCell(format!(
                "{}/{}/fd{}/k{}/{}x{}",
                reference.problem,
                backbone.name(),
                fd_order,
                reference.k,
                reference.nx,
                reference.steps
            ))
        })
}

/// Backbone and stencil-order orderings of mean rRMSE, anchored on the
/// second-order state-space cell of `results`:
/// Non-AR > MLP > GRU ≥ SSM, Non-AR > 10·SSM, and first order > second order.
pub fn ordering_check(results: &[CellResult]) -> Result<Vec<OrderingCheck>, AblationError> {
    let ssm = results
        .iter()
        .find(|r| r.spec.backbone == Backbone::Ssm && r.spec.fd_order == 2)
        .ok_or_else(|| AblationError::MissingCell("ssm/fd2".into()))?;
    let reference = &ssm.spec;
    let cell = |b, o| find(results, reference, b, o).map(|c| c.rrmse_mean);
    let (non_ar, mlp, gru, ssm2, ssm1) = (
        cell(Backbone::NonAr, 2)?,
        cell(Backbone::Mlp, 2)?,
        cell(Backbone::Gru, 2)?,
        cell(Backbone::Ssm, 2)?,
        cell(Backbone::Ssm, 1)?,
    );
    Ok(vec![
        compare("non-ar > mlp".into(), non_ar, mlp, Relation::Greater),
        compare("mlp > gru".into(), mlp, gru, Relation::Greater),
        compare("gru >= ssm".into(), gru, ssm2, Relation::AtLeast),
        compare("non-ar > 10 x ssm".into(), non_ar, ssm2, Relation::Exceeds(10)),
        compare("fd1 > fd2".into(), ssm1, ssm2, Relation::Greater),
    ])
}

/// Sensitivity orderings among cells of one backbone and stencil order:
/// error falls as `k` grows (same grid) and as the grid is refined (same
/// `k`). Only pairs present in `results` are compared.
pub fn sweep_check(results: &[CellResult]) -> Vec<OrderingCheck> {
    let mut checks = Vec::new();
    for a in results {
        for b in results {
            let (sa, sb) = (&a.spec, &b.spec);
            let same_family = sa.problem == sb.problem && sa.backbone == sb.backbone && sa.fd_order == sb.fd_order;
            if !same_family {
                continue;
            }
            if sa.nx == sb.nx && sa.steps == sb.steps && sa.k < sb.k {
                checks.push(compare(
                    format!("k{} > k{} ({})", sa.k, sb.k, sa.backbone.name()),
                    a.rrmse_mean,
                    b.rrmse_mean,
                    Relation::Greater,
                ));
            }
            if sa.k == sb.k && sa.nx < sb.nx && sa.steps < sb.steps {
                checks.push(compare(
                    format!("{}x{} > {}x{} ({})", sa.nx, sa.steps, sb.nx, sb.steps, sa.backbone.name()),
                    a.rrmse_mean,
                    b.rrmse_mean,
                    Relation::Greater,
                ));
            }
        }
    }
    checks
}
