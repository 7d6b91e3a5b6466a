//! Physics-informed training on the model's own rollouts.
//!
//! Each iteration rolls the model out over the whole grid from the exact
//! initial condition, measures finite-difference PDE and boundary residuals
//! of that rollout, differentiates through every step, clips the global
//! gradient norm and applies an AdamW update under a cosine schedule.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BenchError, Grid, PdeProblem, ResidualOperator};
use crate::fd::Accuracy;
use crate::model::{Conditioning, ModelError, PianoModel};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration} (last finite loss {last_finite_loss:?})")]
    Diverged {
        iteration: usize,
        last_finite_loss: Option<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda_interior: f64,
    pub lambda_boundary: f64,
    pub seed: u64,
    /// Spatial nodes per iteration; `None` uses every node.
    pub batch: Option<usize>,
    /// Accuracy order of first-derivative stencils (1 or 2).
    pub fd_order: u8,
    /// Training progress points, in percent of `iterations`, at which the
    /// rollout is kept as a snapshot.
    pub snapshot_percents: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            lr: 3e-4,
            lr_min: 0.0,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            lambda_interior: 1.0,
            lambda_boundary: 1.0,
            seed: 0,
            batch: None,
            fd_order: 2,
            snapshot_percents: vec![5.0, 25.0, 50.0, 100.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("lr_min must lie in [0, lr]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lambda_interior >= 0.0 && self.lambda_boundary >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.batch == Some(0) {
            return bad("batch must be positive");
        }
        if self.accuracy().is_none() {
            return bad("fd_order must be 1 or 2");
        }
        if self
            .snapshot_percents
            .iter()
            .any(|p| !(*p > 0.0 && *p <= 100.0))
        {
            return bad("snapshot percentages must lie in (0, 100]");
        }
        Ok(())
    }

    pub fn accuracy(&self) -> Option<Accuracy> {
        Accuracy::from_order(self.fd_order)
    }

    /// Iteration indices at which snapshots are taken.
    pub fn snapshot_iterations(&self) -> Vec<usize> {
        if self.iterations == 0 {
            return Vec::new();
        }
        let mut its: Vec<usize> = self
            .snapshot_percents
            .iter()
            .map(|p| ((p / 100.0 * self.iterations as f64).round() as usize).clamp(1, self.iterations) - 1)
            .collect();
        its.sort_unstable();
        its.dedup();
        its
    }
}

/// Loss terms of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean interior residual energy.
    pub interior: f64,
    /// Mean boundary residual energy (0 for periodic problems).
    pub boundary: f64,
    /// Mean squared initial velocity (wave only).
    pub velocity: Option<f64>,
}

/// Residual energies per node: interior energy for each interior spatial
/// node, boundary energy for each boundary node.
#[derive(Debug, Clone, PartialEq)]
pub struct Energies {
    pub interior: Vec<f64>,
    pub boundary: Vec<f64>,
}

/// Per-node residual energies of a field: the mean over `j = 1..=M` of the
/// squared residual.
pub fn residual_energy(field: &Tensor, op: &ResidualOperator) -> Result<Energies, TrainError> {
    let mut tape = Tape::new();
    let f = tape.constant(field.clone());
    let r = op.interior(&mut tape, f)?;
    let rv = tape.value(r);
    let (rows, m) = rv.dims2();
    let interior = (0..rows)
        .map(|i| (0..m).map(|j| rv.at(i, j).powi(2)).sum::<f64>() / m as f64)
        .collect();
    let boundary = match op.boundary(&mut tape, f)? {
        Some(b) => {
            let bv = tape.value(b).data();
            bv.chunks(m).map(|c| c.iter().map(|v| v * v).sum::<f64>() / m as f64).collect()
        }
        None => Vec::new(),
    };
    Ok(Energies { interior, boundary })
}

/// Builds the training loss on the tape.
///
/// `rows`, when given, restricts the interior term to those spatial rows
/// (indices into the full grid).
pub fn loss_on_tape(
    tape: &mut Tape,
    field: Var,
    op: &ResidualOperator,
    cfg: &TrainConfig,
    rows: Option<&[usize]>,
) -> Result<(Var, LossBreakdown), TrainError> {
    let r = op.interior(tape, field)?;
    let sq = tape.square(r)?;
    let interior = match rows {
        None => tape.mean(sq)?,
        Some(rows) => {
            let range = op.interior_rows();
            let (n, m) = tape.value(sq).dims2();
            let mut mask = Tensor::zeros(&[n, m]);
            let picked: Vec<usize> = rows
                .iter()
                .filter(|&&i| range.contains(&i))
                .map(|&i| i - range.start)
                .collect();
            let w = 1.0 / (picked.len().max(1) * m) as f64;
            for &i in &picked {
                for j in 0..m {
                    mask.set(i, j, w);
                }
            }
            let mask = tape.constant(mask);
            let weighted = tape.mul(sq, mask)?;
            tape.sum(weighted)?
        }
    };
    let mut total = tape.scale(interior, cfg.lambda_interior)?;
    let mut breakdown = LossBreakdown {
        total: 0.0,
        interior: tape.value(interior).item(),
        boundary: 0.0,
        velocity: None,
    };
    if let Some(b) = op.boundary(tape, field)? {
        let bs = tape.square(b)?;
        let be = tape.mean(bs)?;
        breakdown.boundary = tape.value(be).item();
        let term = tape.scale(be, cfg.lambda_boundary)?;
        total = tape.add(total, term)?;
    }
    if let Some(v) = op.initial_velocity(tape, field)? {
        let vs = tape.square(v)?;
        let ve = tape.mean(vs)?;
        breakdown.velocity = Some(tape.value(ve).item());
        let term = tape.scale(ve, cfg.lambda_interior)?;
        total = tape.add(total, term)?;
    }
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

/// Cosine annealing from `lr0` at `iter = 0` to `lr_min` at `iter = total`.
pub fn cosine_lr(iter: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = iter.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * frac).cos())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

/// AdamW moment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = shapes.into_iter().collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &PianoModel) -> Self {
        Self::new(model.params().iter().map(|p| p.value.len()))
    }

    /// One update with decoupled weight decay.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (pi, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[pi], &mut self.v[pi], &grads[pi]);
            for i in 0..p.len() {
                p[i] *= decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn apply(&mut self, model: &mut PianoModel, grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        let mut params: Vec<&mut [f64]> = model
            .params_mut()
            .iter_mut()
            .map(|p| p.value.data_mut())
            .collect();
        self.step(&mut params, grads, lr, weight_decay);
    }
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Rollout kept at a training milestone.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iteration: usize,
    pub percent: f64,
    pub field: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last update.
    pub last: PianoModel,
    /// Parameters with the lowest observed training loss.
    pub best: PianoModel,
    pub best_loss: Option<f64>,
    pub history: Vec<HistoryRow>,
    pub snapshots: Vec<Snapshot>,
    pub optimizer: AdamW,
}

/// Everything needed to evaluate the loss for one problem and grid.
pub struct LossSetup {
    pub problem: PdeProblem,
    pub grid: Grid,
    pub ic: Vec<f64>,
    pub op: ResidualOperator,
}

impl LossSetup {
    pub fn new(problem: PdeProblem, grid: Grid, accuracy: Accuracy) -> Result<Self, TrainError> {
        let ic = grid.xs().iter().map(|&x| problem.ic(x)).collect();
        let op = problem.residual_operator(&grid, accuracy)?;
        Ok(Self {
            problem,
            grid,
            ic,
            op,
        })
    }

    /// Loss value and flattened per-parameter gradients for `model`.
    pub fn loss_and_grads(
        &self,
        model: &PianoModel,
        cfg: &TrainConfig,
        rows: Option<&[usize]>,
    ) -> Result<(LossBreakdown, Vec<Vec<f64>>, Tensor), TrainError> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ic = tape.constant(Tensor::column(self.ic.clone()));
        let (field, _) = bound.rollout(&mut tape, &self.grid, ic, Conditioning::Free)?;
        let (loss, breakdown) = loss_on_tape(&mut tape, field, &self.op, cfg, rows)?;
        let grads = tape.backward(loss)?;
        let flat = bound
            .vars()
            .iter()
            .map(|&v| grads.wrt(v).data().to_vec())
            .collect();
        Ok((breakdown, flat, tape.value(field).clone()))
    }

    /// Loss of `model` without gradients.
    pub fn loss(&self, model: &PianoModel, cfg: &TrainConfig) -> Result<LossBreakdown, TrainError> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ic = tape.constant(Tensor::column(self.ic.clone()));
        let (field, _) = bound.rollout(&mut tape, &self.grid, ic, Conditioning::Free)?;
        Ok(loss_on_tape(&mut tape, field, &self.op, cfg, None)?.1)
    }
}

/// Trains `model` in place of a copy and returns the outcome.
///
/// `on_iteration` is called after every logged iteration.
pub fn train(
    problem: &PdeProblem,
    grid: &Grid,
    model: &PianoModel,
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let accuracy = cfg.accuracy().expect("validated");
    let setup = LossSetup::new(*problem, *grid, accuracy)?;
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_loss: Option<f64> = None;
    let mut optimizer = AdamW::for_model(model);
    let mut history = Vec::with_capacity(cfg.iterations);
    let snapshot_its = cfg.snapshot_iterations();
    let mut snapshots = Vec::new();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);

    for it in 0..cfg.iterations {
        let lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_min);
        let rows = match cfg.batch {
            Some(b) if b < grid.nx => {
                let mut r = sample(&mut batch_rng, grid.nx, b).into_vec();
                r.sort_unstable();
                Some(r)
            }
            _ => None,
        };
        let step = setup.loss_and_grads(&current, cfg, rows.as_deref());
        let (breakdown, mut grads, field) = match step {
            Ok(s) => s,
            Err(TrainError::Model(ModelError::Diverged { .. }))
            | Err(TrainError::Numerics(NumericsError::NonFinite { .. })) => {
                return Err(TrainError::Diverged {
                    iteration: it,
                    last_finite_loss: history.last().map(|h: &HistoryRow| h.loss.total),
                })
            }
            Err(e) => return Err(e),
        };
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                iteration: it,
                last_finite_loss: history.last().map(|h| h.loss.total),
            });
        }
        if best_loss.map_or(true, |b| breakdown.total < b) {
            best_loss = Some(breakdown.total);
            best = current.clone();
        }
        if let Ok(pos) = snapshot_its.binary_search(&it) {
            snapshots.push(Snapshot {
                iteration: it,
                percent: cfg.snapshot_percents_sorted()[pos],
                field,
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        optimizer.apply(&mut current, &grads, lr, cfg.weight_decay);
        let row = HistoryRow {
            iteration: it,
            lr,
            loss: breakdown,
            grad_norm,
        };
        on_iteration(&row);
        history.push(row);
    }

    Ok(TrainOutcome {
        last: current,
        best,
        best_loss,
        history,
        snapshots,
        optimizer,
    })
}

impl TrainConfig {
    fn snapshot_percents_sorted(&self) -> Vec<f64> {
        // Aligned with `snapshot_iterations` (same ordering and dedup).
        let mut pairs: Vec<(usize, f64)> = self
            .snapshot_percents
            .iter()
            .map(|&p| {
                (
                    ((p / 100.0 * self.iterations as f64).round() as usize).clamp(1, self.iterations) - 1,
                    p,
                )
            })
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pairs.dedup_by_key(|p| p.0);
        pairs.into_iter().map(|p| p.1).collect()
    }
}
