use std::path::Path;

use log::info;
use piano_core::ablation::{ordering_check, results_csv, run_matrix, sweep_check};
use piano_core::bench::{Grid, PdeProblem, ProblemKind};
use piano_core::metrics::{self, diagnose, evaluate, MetricsReport};
use piano_core::model::{rollout, Checkpoint, Conditioning, PianoModel};
use piano_core::numerics::Tensor;
use piano_core::train::{train, AdamW, HistoryRow, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

use crate::io::{create_dir, read_grid, read_json, write_csv, write_grid, write_json};
use crate::options::{AblateArgs, DiagnoseArgs, EvalArgs, TrainArgs};
use crate::CliError;

/// What `train` leaves behind: the model, its optimizer state and enough of
/// the run description to evaluate it later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub problem: ProblemKind,
    pub nx: usize,
    pub steps: usize,
    pub config: TrainConfig,
    /// Iterations completed when this was written.
    pub iterations_run: usize,
    pub best_loss: Option<f64>,
    pub model: Checkpoint,
    pub optimizer: Option<AdamW>,
}

impl RunCheckpoint {
    pub fn load(path: &Path) -> Result<(Self, PianoModel), CliError> {
        let ck: RunCheckpoint = read_json(path)?;
        let model = PianoModel::from_checkpoint(ck.model.clone()).map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok((ck, model))
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub const LOSS_HEADER: [&str; 5] = ["iteration", "lr", "total", "E_interior", "E_boundary"];

pub fn write_loss_csv(path: &Path, history: &[HistoryRow]) -> Result<(), CliError> {
    write_csv(path, |w| {
        w.write_record(LOSS_HEADER)?;
        for h in history {
            w.write_record([
                h.iteration.to_string(),
                h.lr.to_string(),
                h.loss.total.to_string(),
                h.loss.interior.to_string(),
                h.loss.boundary.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let plan = args.plan()?;
    let problem = plan.problem.problem();
    let grid = problem.grid(plan.nx, plan.steps).map_err(usage)?;
    let model = PianoModel::new(plan.backbone, plan.k, plan.config.seed).map_err(usage)?;
    create_dir(&plan.out)?;
    info!(
        "training {} on {} ({}x{}, k={}, {} iterations, {} parameters)",
        plan.backbone,
        plan.problem,
        plan.nx,
        plan.steps,
        plan.k,
        plan.config.iterations,
        model.parameter_count()
    );

    let mut seen = Vec::new();
    let log_every = plan.log_every;
    let result = train(&problem, &grid, &model, &plan.config, |row| {
        if log_every > 0 && row.iteration % log_every == 0 {
            info!(
                "iter {:>6}  loss {:.4e}  interior {:.4e}  boundary {:.4e}  lr {:.3e}",
                row.iteration, row.loss.total, row.loss.interior, row.loss.boundary, row.lr
            );
        }
        seen.push(*row);
    });
    let loss_path = plan.out.join("loss.csv");
    let out = match result {
        Ok(out) => out,
        Err(TrainError::Diverged {
            iteration,
            last_finite_loss,
        }) => {
            write_loss_csv(&loss_path, &seen)?;
            return Err(CliError::Diverged {
                iteration,
                last_finite_loss,
            });
        }
        Err(e) => return Err(CliError::Runtime(e.to_string())),
    };
    write_loss_csv(&loss_path, &out.history)?;
    let checkpoint = |m: &PianoModel| RunCheckpoint {
        problem: plan.problem,
        nx: plan.nx,
        steps: plan.steps,
        config: plan.config.clone(),
        iterations_run: out.history.len(),
        best_loss: out.best_loss,
        model: m.to_checkpoint(),
        optimizer: Some(out.optimizer.clone()),
    };
    write_json(&plan.out.join("checkpoint.json"), &checkpoint(&out.best))?;
    write_json(&plan.out.join("last.json"), &checkpoint(&out.last))?;
    for s in &out.snapshots {
        let name = format!("snapshot_{}pct.csv", s.percent);
        write_grid(&plan.out.join("snapshots").join(name), &s.field, plan.grid_format)?;
    }
    info!(
        "done; best loss {:?}; artifacts in {}",
        out.best_loss,
        plan.out.display()
    );
    Ok(())
}

/// Problem and training grid of an eval/diagnose request.
fn target(
    checkpoint: Option<&RunCheckpoint>,
    problem: Option<ProblemKind>,
    nx: Option<usize>,
    steps: Option<usize>,
) -> Result<(PdeProblem, Grid), CliError> {
    let problem = problem
        .or(checkpoint.map(|c| c.problem))
        .ok_or_else(|| usage("missing required option --problem"))?
        .problem();
    let nx = nx
        .or(checkpoint.map(|c| c.nx))
        .ok_or_else(|| usage("missing required option --nx"))?;
    let steps = steps
        .or(checkpoint.map(|c| c.steps))
        .ok_or_else(|| usage("missing required option --steps"))?;
    let grid = problem.grid(nx, steps).map_err(usage)?;
    Ok((problem, grid))
}

fn load_source(
    checkpoint: &Option<std::path::PathBuf>,
    field: &Option<std::path::PathBuf>,
) -> Result<(Option<(RunCheckpoint, PianoModel)>, Option<Tensor>), CliError> {
    match (checkpoint, field) {
        (Some(c), None) => Ok((Some(RunCheckpoint::load(c)?), None)),
        (None, Some(f)) => Ok((None, Some(read_grid(f)?))),
        _ => Err(usage("exactly one of --checkpoint or --field is required")),
    }
}

fn check_shape(field: &Tensor, grid: &Grid) -> Result<(), CliError> {
    if field.shape() != grid.field_shape() {
        return Err(usage(format!(
            "field shape {:?} does not match grid shape {:?}",
            field.shape(),
            grid.field_shape()
        )));
    }
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (source, field) = load_source(&args.checkpoint, &args.field)?;
    let ck = source.as_ref().map(|s| &s.0);
    let (problem, grid) = target(ck, args.problem, args.nx, args.steps)?;
    let seed = args.seed.or(ck.map(|c| c.config.seed)).unwrap_or(0);
    let out_dir = args.out.unwrap_or_else(|| "piano-eval".into());
    let format = args.grid_format.unwrap_or_default();

    let (report, eval_grid, pred, truth) = match (source, field) {
        (Some((_, model)), _) => {
            let ev = evaluate(&model, &problem, &grid, seed).map_err(|e| CliError::Runtime(e.to_string()))?;
            (ev.report, ev.grid, ev.pred, ev.truth)
        }
        (None, Some(pred)) => {
            let eg = grid.half_offset();
            check_shape(&pred, &eg)?;
            let truth = problem.sample_on(eg).truth;
            let err = |e: metrics::MetricsError| CliError::Runtime(e.to_string());
            let report = MetricsReport {
                problem: problem.name().into(),
                grid: [grid.nx, grid.steps],
                seed,
                rmae: metrics::rmae(&pred, &truth).map_err(err)?,
                rrmse: metrics::rrmse(&pred, &truth).map_err(err)?,
                bound_pass: None,
                max_delta: None,
                bound_slack: None,
                per_step_error: metrics::step_errors(&pred, &truth, eg.dx).map_err(err)?,
                delta: Vec::new(),
            };
            (report, eg, pred, truth)
        }
        (None, None) => unreachable!("load_source requires one source"),
    };

    let abs_err = Tensor::new(
        pred.shape().to_vec(),
        pred.data().iter().zip(truth.data()).map(|(p, u)| (p - u).abs()).collect(),
    )
    .expect("same shape");
    write_json(&out_dir.join("metrics.json"), &report)?;
    write_grid(&out_dir.join("pred.csv"), &pred, format)?;
    write_grid(&out_dir.join("truth.csv"), &truth, format)?;
    write_grid(&out_dir.join("error.csv"), &abs_err, format)?;
    if let Some(xs) = &args.profile {
        if let Some(&bad) = xs.iter().find(|&&i| i >= eval_grid.nx) {
            return Err(usage(format!("profile index {bad} outside 0..{}", eval_grid.nx)));
        }
        write_csv(&out_dir.join("profile.csv"), |w| {
            w.write_record(["x_index", "x", "t_index", "t", "pred", "truth"])?;
            for &i in xs {
                for j in 0..=eval_grid.steps {
                    w.write_record([
                        i.to_string(),
                        eval_grid.x(i).to_string(),
                        j.to_string(),
                        eval_grid.t(j).to_string(),
                        pred.at(i, j).to_string(),
                        truth.at(i, j).to_string(),
                    ])?;
                }
            }
            Ok(())
        })?;
    }
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

#[derive(Debug, Serialize)]
struct DiagnoseSummary {
    problem: String,
    grid: [usize; 2],
    tol: f64,
    bound_pass: bool,
    first_violation: Option<usize>,
    slack: f64,
    max_delta: f64,
    max_step_error: f64,
}

pub fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), CliError> {
    let (source, field) = load_source(&args.checkpoint, &args.field)?;
    let (problem, grid) = target(source.as_ref().map(|s| &s.0), args.problem, args.nx, args.steps)?;
    if !problem.has_flow_oracle() {
        return Err(usage(format!(
            "diagnose is unsupported for {}: it has no exact one-step evolution oracle",
            problem.name()
        )));
    }
    let pred = match (source, field) {
        (Some((_, model)), _) => {
            let ic: Vec<f64> = grid.xs().iter().map(|&x| problem.ic(x)).collect();
            rollout(&model, &grid, &ic, Conditioning::Free)
                .map_err(|e| CliError::Runtime(e.to_string()))?
                .field
        }
        (None, Some(f)) => {
            check_shape(&f, &grid)?;
            f
        }
        (None, None) => unreachable!(),
    };
    let d = diagnose(&pred, &problem, &grid).map_err(|e| CliError::Runtime(e.to_string()))?;
    let out_dir = args.out.unwrap_or_else(|| "piano-diagnose".into());
    write_csv(&out_dir.join("diagnose.csv"), |w| {
        w.write_record(["n", "e_n", "delta_n", "bound_rhs", "pass", "e_next", "lipschitz"])?;
        for n in 0..d.delta.len() {
            w.write_record([
                n.to_string(),
                d.step_error[n].to_string(),
                d.delta[n].to_string(),
                d.bound.rhs[n].to_string(),
                d.bound.pass[n].to_string(),
                d.step_error[n + 1].to_string(),
                d.lipschitz[n].to_string(),
            ])?;
        }
        Ok(())
    })?;
    let summary = DiagnoseSummary {
        problem: problem.name().into(),
        grid: [grid.nx, grid.steps],
        tol: d.tol,
        bound_pass: d.bound.all_pass(),
        first_violation: d.bound.first_violation(),
        slack: d.bound.slack,
        max_delta: d.delta.iter().copied().fold(0.0, f64::max),
        max_step_error: d.step_error.iter().copied().fold(0.0, f64::max),
    };
    write_json(&out_dir.join("diagnose.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    Ok(())
}

pub fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let plan = args.plan()?;
    create_dir(&plan.out)?;
    let results = run_matrix(&plan.specs, &plan.base, |spec, run| match run.rrmse {
        Some(r) => info!("{} seed {}: rRMSE {:.4e}", spec.label(), run.seed, r),
        None => info!("{} seed {}: diverged at {:?}", spec.label(), run.seed, run.diverged_at),
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    crate::io::write_atomic(&plan.out.join("results.csv"), results_csv(&results).as_bytes())?;
    write_json(&plan.out.join("results.json"), &results)?;
    let mut checks = ordering_check(&results).unwrap_or_default();
    checks.extend(sweep_check(&results));
    if !checks.is_empty() {
        write_json(&plan.out.join("ordering.json"), &checks)?;
        for c in &checks {
            info!("{}: {} (margin {:.3e})", c.name, if c.pass { "pass" } else { "FAIL" }, c.margin);
        }
    }
    print!("{}", results_csv(&results));
    Ok(())
}

