//! Accuracy metrics and the error-propagation diagnostic.
//!
//! Relative errors use plain sums over every node. Per-step errors and
//! one-step rollout errors use the discrete L2 norm `sqrt(dx · Σ v²)`, so
//! that the propagation bound
//!
//! ```text
//! ‖e_{n+1}‖ ≤ L · ‖e_n‖ + δ_n
//! ```
//!
//! can be checked directly, `L` being the Lipschitz constant of the exact
//! one-step map and `δ_n` the gap between the model's step and the exact
//! evolution of the model's own state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BenchError, Grid, PdeProblem};
use crate::model::{rollout, Conditioning, ModelError, PianoModel};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction shape {pred:?} does not match truth shape {truth:?}")]
    Shape { pred: Vec<usize>, truth: Vec<usize> },
    #[error("reference field is identically zero")]
    ZeroReference,
    #[error("sequences misaligned: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn same_shape(pred: &Tensor, truth: &Tensor) -> Result<(), MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::Shape {
            pred: pred.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    Ok(())
}

/// `Σ|û − u| / Σ|u|`.
pub fn rmae(pred: &Tensor, truth: &Tensor) -> Result<f64, MetricsError> {
    same_shape(pred, truth)?;
    let den: f64 = truth.data().iter().map(|u| u.abs()).sum();
    if den == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let num: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, u)| (p - u).abs())
        .sum();
    Ok(num / den)
}

/// `sqrt(Σ(û − u)² / Σu²)`.
pub fn rrmse(pred: &Tensor, truth: &Tensor) -> Result<f64, MetricsError> {
    same_shape(pred, truth)?;
    let den: f64 = truth.data().iter().map(|u| u * u).sum();
    if den == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let num: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, u)| (p - u).powi(2))
        .sum();
    Ok((num / den).sqrt())
}

/// Discrete L2 norm `sqrt(dx · Σ v²)`.
pub fn grid_norm(v: &[f64], dx: f64) -> f64 {
    (dx * v.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

/// `‖e_n‖` for every time index `n = 0..=M`.
pub fn step_errors(pred: &Tensor, truth: &Tensor, dx: f64) -> Result<Vec<f64>, MetricsError> {
    same_shape(pred, truth)?;
    let (_, cols) = pred.dims2();
    Ok((0..cols)
        .map(|j| {
            let e: Vec<f64> = pred
                .column_values(j)
                .iter()
                .zip(truth.column_values(j))
                .map(|(p, u)| p - u)
                .collect();
            grid_norm(&e, dx)
        })
        .collect())
}

/// `δ_n = ‖û_{n+1} − G(Δt)[û_n]‖` for `n = 0..M`.
pub fn rollout_errors(pred: &Tensor, problem: &PdeProblem, grid: &Grid) -> Result<Vec<f64>, MetricsError> {
    let shape = grid.field_shape();
    if pred.shape() != shape {
        return Err(MetricsError::Shape {
            pred: pred.shape().to_vec(),
            truth: shape.to_vec(),
        });
    }
    let stepper = problem.stepper(grid)?;
    (0..grid.steps)
        .map(|n| {
            let next = stepper.step(&pred.column_values(n), grid.dt)?;
            let d: Vec<f64> = pred
                .column_values(n + 1)
                .iter()
                .zip(&next)
                .map(|(a, b)| a - b)
                .collect();
            Ok(grid_norm(&d, grid.dx))
        })
        .collect()
}

/// Largest one-step rollout error of the exact solution itself: how far the
/// discrete oracle is from the sampled analytical field.
pub fn oracle_residual(problem: &PdeProblem, grid: &Grid) -> Result<f64, MetricsError> {
    let truth = problem.sample_on(*grid).truth;
    Ok(rollout_errors(&truth, problem, grid)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Outcome of checking the propagation bound at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `L_n · ‖e_n‖ + δ_n` for `n = 0..M`.
    pub rhs: Vec<f64>,
    /// Whether `‖e_{n+1}‖ ≤ rhs_n + tol`.
    pub pass: Vec<bool>,
    /// `min_n (rhs_n − ‖e_{n+1}‖)`.
    pub slack: f64,
}

impl BoundCheck {
    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.pass.iter().position(|&p| !p)
    }
}

/// Checks `e[n+1] ≤ lipschitz[n] · e[n] + delta[n] + tol` for every `n`.
pub fn check_bound_steps(e: &[f64], delta: &[f64], lipschitz: &[f64], tol: f64) -> Result<BoundCheck, MetricsError> {
    if e.len() != delta.len() + 1 || lipschitz.len() != delta.len() {
        return Err(MetricsError::Misaligned(format!(
            "{} errors, {} deltas, {} constants",
            e.len(),
            delta.len(),
            lipschitz.len()
        )));
    }
    let rhs: Vec<f64> = (0..delta.len()).map(|n| lipschitz[n] * e[n] + delta[n]).collect();
    let pass = (0..delta.len()).map(|n| e[n + 1] <= rhs[n] + tol).collect();
    let slack = (0..delta.len())
        .map(|n| rhs[n] - e[n + 1])
        .fold(f64::INFINITY, f64::min);
    Ok(BoundCheck { rhs, pass, slack })
}

/// Same as [`check_bound_steps`] with one constant for every step.
pub fn check_bound(e: &[f64], delta: &[f64], lipschitz: f64, tol: f64) -> Result<BoundCheck, MetricsError> {
    check_bound_steps(e, delta, &vec![lipschitz; delta.len()], tol)
}

/// Absolute slack added on top of the measured oracle residual, covering
/// round-off in the norms themselves.
pub const ROUNDOFF_TOL: f64 = 1e-12;

/// Full propagation diagnostic of a predicted field on an oracle grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub step_error: Vec<f64>,
    pub delta: Vec<f64>,
    pub lipschitz: Vec<f64>,
    pub tol: f64,
    pub bound: BoundCheck,
}

pub fn diagnose(pred: &Tensor, problem: &PdeProblem, grid: &Grid) -> Result<Diagnosis, MetricsError> {
    let truth = problem.sample_on(*grid).truth;
    let step_error = step_errors(pred, &truth, grid.dx)?;
    let delta = rollout_errors(pred, problem, grid)?;
    let lipschitz = (0..grid.steps)
        .map(|n| {
            problem
                .lipschitz_between(grid.dt, &pred.column_values(n), &truth.column_values(n))
                .ok_or(MetricsError::Bench(BenchError::NoOracle(problem.kind)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let tol = oracle_residual(problem, grid)? + ROUNDOFF_TOL;
    let bound = check_bound_steps(&step_error, &delta, &lipschitz, tol)?;
    Ok(Diagnosis {
        step_error,
        delta,
        lipschitz,
        tol,
        bound,
    })
}

/// Evaluation summary of one model on one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub problem: String,
    /// `[Nx, M]` of the training grid.
    pub grid: [usize; 2],
    pub seed: u64,
    pub rmae: f64,
    pub rrmse: f64,
    /// `None` when the problem has no exact one-step oracle.
    pub bound_pass: Option<bool>,
    pub max_delta: Option<f64>,
    pub bound_slack: Option<f64>,
    /// `‖e_n‖` on the evaluation grid.
    pub per_step_error: Vec<f64>,
    /// `δ_n` on the training grid.
    pub delta: Vec<f64>,
}

/// Predicted and reference fields on the evaluation grid.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub grid: Grid,
    pub pred: Tensor,
    pub truth: Tensor,
}

/// Evaluates a model trained on `train_grid`: accuracy on the grid shifted
/// by half a spatial spacing (a fresh rollout from the exact initial
/// condition there), propagation diagnostic on the training grid itself.
pub fn evaluate(
    model: &PianoModel,
    problem: &PdeProblem,
    train_grid: &Grid,
    seed: u64,
) -> Result<Evaluation, MetricsError> {
    let grid = train_grid.half_offset();
    let sample = problem.sample_on(grid);
    let pred = rollout(model, &grid, &sample.ic, Conditioning::Free)?.field;
    let rmae = rmae(&pred, &sample.truth)?;
    let rrmse = rrmse(&pred, &sample.truth)?;
    let per_step_error = step_errors(&pred, &sample.truth, grid.dx)?;
    let (bound_pass, max_delta, bound_slack, delta) = if problem.has_flow_oracle() {
        let native = problem.sample_on(*train_grid);
        let own = rollout(model, train_grid, &native.ic, Conditioning::Free)?.field;
        let d = diagnose(&own, problem, train_grid)?;
        let max = d.delta.iter().copied().fold(0.0, f64::max);
        (Some(d.bound.all_pass()), Some(max), Some(d.bound.slack), d.delta)
    } else {
        (None, None, None, Vec::new())
    };
    Ok(Evaluation {
        report: MetricsReport {
            problem: problem.name().to_string(),
            grid: [train_grid.nx, train_grid.steps],
            seed,
            rmae,
            rrmse,
            bound_pass,
            max_delta,
            bound_slack,
            per_step_error,
            delta,
        },
        grid,
        pred,
        truth: sample.truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{make_convection, make_heat, make_reaction, make_wave};
    use crate::model::Backbone;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn trivial_relative_errors() {
        let t = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(rmae(&t, &t).unwrap(), 0.0);
        assert_eq!(rrmse(&t, &t).unwrap(), 0.0);
        assert!((rmae(&t.map(|v| 2.0 * v), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((rrmse(&Tensor::zeros(&[2, 2]), &t).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_reference_and_shape_errors() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(matches!(rmae(&z, &z), Err(MetricsError::ZeroReference)));
        assert!(matches!(rrmse(&z, &z), Err(MetricsError::ZeroReference)));
        let t = Tensor::full(&[3, 2], 1.0);
        assert!(matches!(rmae(&t, &z), Err(MetricsError::Shape { .. })));
    }

    #[test]
    fn brute_force_loops_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, t) = (random(&mut rng, 5, 5), random(&mut rng, 5, 5));
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..5 {
            for j in 0..5 {
                let e = p.at(i, j) - t.at(i, j);
                a += e.abs();
                b += t.at(i, j).abs();
                c += e * e;
                d += t.at(i, j) * t.at(i, j);
            }
        }
        assert!((rmae(&p, &t).unwrap() - a / b).abs() < 1e-12);
        assert!((rrmse(&p, &t).unwrap() - (c / d).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relative_errors_are_scale_invariant(
            seed in 0u64..1000,
            c in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = (random(&mut rng, 4, 6), random(&mut rng, 4, 6));
            let (ps, ts) = (p.map(|v| c * v), t.map(|v| c * v));
            prop_assert!((rmae(&ps, &ts).unwrap() - rmae(&p, &t).unwrap()).abs() < 1e-12);
            prop_assert!((rrmse(&ps, &ts).unwrap() - rrmse(&p, &t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn step_errors_of_constant_offset() {
        let t = Tensor::zeros(&[7, 4]);
        let p = Tensor::full(&[7, 4], -0.3);
        let e = step_errors(&p, &t, 0.1).unwrap();
        let want = (0.1f64 * 7.0).sqrt() * 0.3;
        assert!(e.iter().all(|v| (v - want).abs() < 1e-15));
        assert_eq!(step_errors(&t, &t, 0.1).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn check_bound_arithmetic() {
        let ok = check_bound(&[0.0, 0.0, 0.0], &[0.0, 0.0], 1.0, 0.0).unwrap();
        assert!(ok.all_pass());
        let bad = check_bound(&[0.0, 1.0], &[0.5], 1.0, 0.0).unwrap();
        assert_eq!(bad.first_violation(), Some(0));
        assert_eq!(bad.slack, -0.5);
        assert!(check_bound(&[0.0], &[0.1], 1.0, 0.0).is_err());
    }

    #[test]
    fn analytical_field_has_negligible_rollout_error() {
        for p in [make_reaction(), make_convection(), make_heat()] {
            let g = p.grid(32, 20).unwrap();
            let r = oracle_residual(&p, &g).unwrap();
            assert!(r < 1e-8, "{}: {r}", p.name());
        }
    }

    #[test]
    fn corrupted_column_moves_one_delta_for_linear_flows() {
        for p in [make_convection(), make_heat()] {
            let g = p.grid(24, 10).unwrap();
            let s = p.sample_on(g);
            let n = 4;
            let c = 0.01;
            let mut bad = s.truth.clone();
            // Interior nodes only for Dirichlet problems so the offset is
            // an admissible state.
            let rows: Vec<usize> = match p.topology() {
                crate::bench::Topology::Periodic => (0..g.nx).collect(),
                crate::bench::Topology::Dirichlet => (1..g.nx - 1).collect(),
            };
            for &i in &rows {
                bad.set(i, n + 1, bad.at(i, n + 1) + c);
            }
            let d0 = rollout_errors(&s.truth, &p, &g).unwrap();
            let d1 = rollout_errors(&bad, &p, &g).unwrap();
            let want = (g.dx * rows.len() as f64).sqrt() * c;
            assert!((d1[n] - want).abs() < 1e-9, "{}: {} vs {want}", p.name(), d1[n]);
            for m in 0..n {
                assert!((d1[m] - d0[m]).abs() < 1e-12);
            }
            // The following step sees a perturbed input; a linear flow with
            // L ≤ 1 carries at most the same norm forward.
            assert!(d1[n + 1] <= want * 1.0 + 1e-9);
        }
    }

    #[test]
    fn wave_has_no_rollout_error() {
        let p = make_wave();
        let g = p.grid(8, 8).unwrap();
        let s = p.sample_on(g);
        assert!(matches!(
            rollout_errors(&s.truth, &p, &g),
            Err(MetricsError::Bench(BenchError::NoOracle(_)))
        ));
    }

    #[test]
    fn bound_holds_for_random_models() {
        for p in [make_reaction(), make_convection(), make_heat()] {
            for backbone in [Backbone::Ssm, Backbone::Gru, Backbone::NonAr] {
                let g = p.grid(16, 12).unwrap();
                let m = PianoModel::new(backbone, 8, 3).unwrap();
                let s = p.sample_on(g);
                let f = rollout(&m, &g, &s.ic, Conditioning::Free).unwrap().field;
                let d = diagnose(&f, &p, &g).unwrap();
                assert_eq!(d.step_error[0], 0.0);
                assert!(d.bound.all_pass(), "{} {:?}: {:?}", p.name(), backbone, d.bound);
            }
        }
    }

    #[test]
    fn local_lipschitz_matches_global_on_unit_interval() {
        let p = make_reaction();
        let dt = 0.02;
        let a = [0.0, 0.5, 1.0];
        assert_eq!(p.lipschitz_between(dt, &a, &a), p.lipschitz(dt));
        assert!(p.lipschitz_between(dt, &[-0.2], &a).unwrap() > p.lipschitz(dt).unwrap());
    }

    #[test]
    fn evaluation_report_shape() {
        let p = make_heat();
        let g = p.grid(10, 8).unwrap();
        let m = PianoModel::new(Backbone::Ssm, 4, 0).unwrap();
        let ev = evaluate(&m, &p, &g, 7).unwrap();
        assert_eq!(ev.pred.shape(), &[9, 9]);
        assert_eq!(ev.report.grid, [10, 8]);
        assert_eq!(ev.report.delta.len(), 8);
        assert_eq!(ev.report.per_step_error.len(), 9);
        assert!(ev.report.rrmse > 0.0);
        let json = serde_json::to_value(&ev.report).unwrap();
        for key in ["problem", "grid", "seed", "rmae", "rrmse", "bound_pass", "max_delta"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let w = make_wave();
        let ev = evaluate(&m, &w, &w.grid(10, 8).unwrap(), 0).unwrap();
        assert_eq!(ev.report.bound_pass, None);
    }
}
