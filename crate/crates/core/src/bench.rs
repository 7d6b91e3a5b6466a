//! The four 1-D time-dependent benchmark problems.
//!
//! Each problem knows its domain, initial and boundary conditions, closed-form
//! solution, finite-difference residual, and (except the wave equation) an
//! exact one-step evolution map with its Lipschitz constant.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fd::{Accuracy, Axis, AxisOperator, Boundary, Derivative, StencilError, StencilSpec};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub const WAVE_SPEED: f64 = 2.0;
pub const REACTION_RATE: f64 = 5.0;
pub const CONVECTION_SPEED: f64 = 50.0;
pub const HEAT_DIFFUSIVITY: f64 = 0.1;

/// Smallest node counts accepted along either axis.
pub const MIN_NODES: usize = 4;
pub const MIN_STEPS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("unknown problem '{0}' (expected wave, reaction, convection or heat)")]
    UnknownProblem(String),
    #[error("grid needs at least {MIN_NODES} spatial nodes and {MIN_STEPS} time steps, got {nx} × {steps}")]
    GridTooSmall { nx: usize, steps: usize },
    #[error("{0} has no exact evolution oracle")]
    NoOracle(ProblemKind),
    #[error("state length {got} does not match grid with {expected} nodes")]
    StateLength { expected: usize, got: usize },
    #[error("grid is incompatible with the problem: {0}")]
    GridMismatch(String),
    #[error("exact flow is undefined for state value {0} (finite-time blow-up)")]
    FlowBlowUp(f64),
    #[error(transparent)]
    Stencil(#[from] StencilError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Wave,
    Reaction,
    Convection,
    Heat,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [
        ProblemKind::Wave,
        ProblemKind::Reaction,
        ProblemKind::Convection,
        ProblemKind::Heat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Wave => "wave",
            ProblemKind::Reaction => "reaction",
            ProblemKind::Convection => "convection",
            ProblemKind::Heat => "heat",
        }
    }

    pub fn problem(self) -> PdeProblem {
        match self {
            ProblemKind::Wave => make_wave(),
            ProblemKind::Reaction => make_reaction(),
            ProblemKind::Convection => make_convection(),
            ProblemKind::Heat => make_heat(),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| BenchError::UnknownProblem(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Dirichlet,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryCondition {
    /// Prescribed values at the left and right ends.
    Dirichlet { left: f64, right: f64 },
    Periodic,
}

impl BoundaryCondition {
    pub fn topology(self) -> Topology {
        match self {
            BoundaryCondition::Dirichlet { .. } => Topology::Dirichlet,
            BoundaryCondition::Periodic => Topology::Periodic,
        }
    }
}

/// A uniform space-time grid with `nx` spatial nodes and `steps + 1` time
/// nodes starting at `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub nx: usize,
    pub steps: usize,
    pub dx: f64,
    pub dt: f64,
    pub topology: Topology,
    /// Position of the first spatial node relative to `x_min`.
    pub x_offset: f64,
}

impl Grid {
    pub fn new(
        (x_min, x_max): (f64, f64),
        (t_min, t_max): (f64, f64),
        topology: Topology,
        nx: usize,
        steps: usize,
    ) -> Result<Self, BenchError> {
        if nx < MIN_NODES || steps < MIN_STEPS {
            return Err(BenchError::GridTooSmall { nx, steps });
        }
        let dx = match topology {
            Topology::Dirichlet => (x_max - x_min) / (nx - 1) as f64,
            Topology::Periodic => (x_max - x_min) / nx as f64,
        };
        Ok(Self {
            x_min,
            x_max,
            t_min,
            t_max,
            nx,
            steps,
            dx,
            dt: (t_max - t_min) / steps as f64,
            topology,
            x_offset: 0.0,
        })
    }

    /// Evaluation grid whose spatial nodes sit halfway between this grid's
    /// nodes. The time axis is unchanged: it must start at the initial time
    /// and keep the step the model was trained with.
    pub fn half_offset(&self) -> Self {
        let nx = match self.topology {
            Topology::Dirichlet => self.nx - 1,
            Topology::Periodic => self.nx,
        };
        Self {
            nx,
            x_offset: self.x_offset + 0.5 * self.dx,
            ..*self
        }
    }

    pub fn is_offset(&self) -> bool {
        self.x_offset != 0.0
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + self.x_offset + i as f64 * self.dx
    }

    pub fn t(&self, j: usize) -> f64 {
        self.t_min + j as f64 * self.dt
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.t(j)).collect()
    }

    /// Shape of a solution field on this grid.
    pub fn field_shape(&self) -> [usize; 2] {
        [self.nx, self.steps + 1]
    }
}

/// A grid together with the initial condition and the exact solution
/// sampled on it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub grid: Grid,
    pub ic: Vec<f64>,
    pub truth: Tensor,
}

/// One benchmark problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeProblem {
    pub kind: ProblemKind,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
    pub bc: BoundaryCondition,
}

/// `u_tt = 4 u_xx` on `[0, 1] × [0, 1]`, zero Dirichlet ends.
pub fn make_wave() -> PdeProblem {
    PdeProblem {
        kind: ProblemKind::Wave,
        x_range: (0.0, 1.0),
        t_range: (0.0, 1.0),
        bc: BoundaryCondition::Dirichlet {
            left: 0.0,
            right: 0.0,
        },
    }
}

/// `u_t = 5 u (1 − u)` on `[0, 2π] × [0, 1]`, periodic.
pub fn make_reaction() -> PdeProblem {
    PdeProblem {
        kind: ProblemKind::Reaction,
        x_range: (0.0, 2.0 * PI),
        t_range: (0.0, 1.0),
        bc: BoundaryCondition::Periodic,
    }
}

/// `u_t + 50 u_x = 0` on `[0, 2π] × [0, 1]`, periodic.
pub fn make_convection() -> PdeProblem {
    PdeProblem {
        kind: ProblemKind::Convection,
        x_range: (0.0, 2.0 * PI),
        t_range: (0.0, 1.0),
        bc: BoundaryCondition::Periodic,
    }
}

/// `u_t = 0.1 u_xx` on `[0, 1] × [0, 1]`, zero Dirichlet ends.
pub fn make_heat() -> PdeProblem {
    PdeProblem {
        kind: ProblemKind::Heat,
        x_range: (0.0, 1.0),
        t_range: (0.0, 1.0),
        bc: BoundaryCondition::Dirichlet {
            left: 0.0,
            right: 0.0,
        },
    }
}

fn reaction_profile(x: f64) -> f64 {
    let s = PI / 4.0;
    (-(x - PI).powi(2) / (2.0 * s * s)).exp()
}

/// Closed-form logistic flow of `u_t = ρ u (1 − u)` over `dt`.
fn logistic_flow(u: f64, dt: f64) -> Result<f64, BenchError> {
    let g = (REACTION_RATE * dt).exp();
    let den = u * g + 1.0 - u;
    if den <= 0.0 {
        return Err(BenchError::FlowBlowUp(u));
    }
    Ok(u * g / den)
}

impl PdeProblem {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn topology(&self) -> Topology {
        self.bc.topology()
    }

    pub fn ic(&self, x: f64) -> f64 {
        self.analytical(x, self.t_range.0)
    }

    pub fn analytical(&self, x: f64, t: f64) -> f64 {
        match self.kind {
            ProblemKind::Wave => {
                (PI * x).sin() * (2.0 * PI * t).cos()
                    + 0.5 * (3.0 * PI * x).sin() * (6.0 * PI * t).cos()
            }
            ProblemKind::Reaction => {
                let h = reaction_profile(x);
                let g = (REACTION_RATE * t).exp();
                h * g / (h * g + 1.0 - h)
            }
            ProblemKind::Convection => (x - CONVECTION_SPEED * t).sin(),
            ProblemKind::Heat => (PI * x).sin() * (-HEAT_DIFFUSIVITY * PI * PI * t).exp(),
        }
    }

    /// Evenly spaced grid over the problem domain.
    pub fn grid(&self, nx: usize, steps: usize) -> Result<Grid, BenchError> {
        Grid::new(self.x_range, self.t_range, self.topology(), nx, steps)
    }

    /// Grid plus initial condition and the exact field on it.
    pub fn sample_grid(&self, nx: usize, steps: usize) -> Result<Sample, BenchError> {
        let grid = self.grid(nx, steps)?;
        Ok(self.sample_on(grid))
    }

    pub fn sample_on(&self, grid: Grid) -> Sample {
        let xs = grid.xs();
        let ts = grid.ts();
        let ic = xs.iter().map(|&x| self.ic(x)).collect();
        let mut truth = Tensor::zeros(&grid.field_shape());
        for (i, &x) in xs.iter().enumerate() {
            for (j, &t) in ts.iter().enumerate() {
                truth.set(i, j, self.analytical(x, t));
            }
        }
        Sample { grid, ic, truth }
    }

    pub fn has_flow_oracle(&self) -> bool {
        self.kind != ProblemKind::Wave
    }

    /// Lipschitz constant of the exact one-step evolution map over `dt`,
    /// in the discrete L2 norm on the grid. `None` for the wave equation.
    ///
    /// For the reaction problem this is the supremum of the flow-map
    /// derivative over the invariant interval `[0, 1]`, attained at 0.
    pub fn lipschitz(&self, dt: f64) -> Option<f64> {
        match self.kind {
            ProblemKind::Wave => None,
            ProblemKind::Reaction => Some((REACTION_RATE * dt).exp()),
            ProblemKind::Convection => Some(1.0),
            ProblemKind::Heat => {
                let l = self.x_range.1 - self.x_range.0;
                Some((-HEAT_DIFFUSIVITY * (PI / l).powi(2) * dt).exp())
            }
        }
    }

    /// Lipschitz constant of the one-step map restricted to states between
    /// `a` and `b` node by node. Equals [`Self::lipschitz`] whenever both
    /// states are non-negative; below zero the logistic flow stretches more,
    /// and the bound grows to the flow derivative at the smallest value.
    pub fn lipschitz_between(&self, dt: f64, a: &[f64], b: &[f64]) -> Option<f64> {
        let global = self.lipschitz(dt)?;
        if self.kind != ProblemKind::Reaction {
            return Some(global);
        }
        let lo = a.iter().chain(b).copied().fold(0.0, f64::min);
        let g = (REACTION_RATE * dt).exp();
        let den = 1.0 + lo * (g - 1.0);
        Some(if den > 0.0 { g / (den * den) } else { f64::INFINITY })
    }

    /// Exact evolution of a grid state by `dt`.
    pub fn flow_oracle(&self, grid: &Grid, state: &[f64], dt: f64) -> Result<Vec<f64>, BenchError> {
        if state.len() != grid.nx {
            return Err(BenchError::StateLength {
                expected: grid.nx,
                got: state.len(),
            });
        }
        match self.kind {
            ProblemKind::Wave => Err(BenchError::NoOracle(self.kind)),
            ProblemKind::Reaction => state.iter().map(|&u| logistic_flow(u, dt)).collect(),
            ProblemKind::Convection => {
                self.require_native(grid)?;
                Ok(SpectralShift::new(grid.nx).apply(state, CONVECTION_SPEED * dt, grid.x_max - grid.x_min))
            }
            ProblemKind::Heat => {
                self.require_native(grid)?;
                let l = grid.x_max - grid.x_min;
                Ok(SineSeries::new(grid.nx).evolve(state, |k| {
                    (-HEAT_DIFFUSIVITY * (k as f64 * PI / l).powi(2) * dt).exp()
                }))
            }
        }
    }

    /// A reusable oracle for repeated steps on one grid.
    pub fn stepper(&self, grid: &Grid) -> Result<FlowStepper, BenchError> {
        match self.kind {
            ProblemKind::Wave => Err(BenchError::NoOracle(self.kind)),
            ProblemKind::Reaction => Ok(FlowStepper::Pointwise),
            ProblemKind::Convection => {
                self.require_native(grid)?;
                Ok(FlowStepper::Shift(SpectralShift::new(grid.nx), grid.x_max - grid.x_min))
            }
            ProblemKind::Heat => {
                self.require_native(grid)?;
                Ok(FlowStepper::Sine(SineSeries::new(grid.nx), grid.x_max - grid.x_min))
            }
        }
    }

    fn require_native(&self, grid: &Grid) -> Result<(), BenchError> {
        if grid.topology != self.topology() || grid.is_offset() {
            return Err(BenchError::GridMismatch(format!(
                "{} oracle needs an unshifted {:?} grid",
                self.name(),
                self.topology()
            )));
        }
        Ok(())
    }

    /// Builds the finite-difference residual operator for a grid.
    pub fn residual_operator(
        &self,
        grid: &Grid,
        accuracy: Accuracy,
    ) -> Result<ResidualOperator, BenchError> {
        if grid.topology != self.topology() {
            return Err(BenchError::GridMismatch(format!(
                "{} needs a {:?} grid, got {:?}",
                self.name(),
                self.topology(),
                grid.topology
            )));
        }
        let space_boundary = match grid.topology {
            Topology::Periodic => Boundary::PeriodicWrap,
            Topology::Dirichlet => Boundary::OneSided,
        };
        let first = |b| StencilSpec::new(Derivative::First, accuracy, b);
        // Second derivatives always use the central stencil.
        let second = |b| StencilSpec::new(Derivative::Second, Accuracy::Second, b);
        let (ops, time_first_for_velocity) = match self.kind {
            ProblemKind::Wave => (
                ResidualOps::Wave {
                    dtt: AxisOperator::new(second(Boundary::OneSided), Axis::Time, grid.steps + 1, grid.dt)?,
                    dxx: AxisOperator::new(second(space_boundary), Axis::Space, grid.nx, grid.dx)?,
                },
                Some(AxisOperator::new(
                    StencilSpec::new(Derivative::First, Accuracy::Second, Boundary::OneSided),
                    Axis::Time,
                    grid.steps + 1,
                    grid.dt,
                )?),
            ),
            ProblemKind::Reaction => (
                ResidualOps::Reaction {
                    dt: AxisOperator::new(first(Boundary::OneSided), Axis::Time, grid.steps + 1, grid.dt)?,
                },
                None,
            ),
            ProblemKind::Convection => (
                ResidualOps::Convection {
                    dt: AxisOperator::new(first(Boundary::OneSided), Axis::Time, grid.steps + 1, grid.dt)?,
                    dx: AxisOperator::new(first(space_boundary), Axis::Space, grid.nx, grid.dx)?,
                },
                None,
            ),
            ProblemKind::Heat => (
                ResidualOps::Heat {
                    dt: AxisOperator::new(first(Boundary::OneSided), Axis::Time, grid.steps + 1, grid.dt)?,
                    dxx: AxisOperator::new(second(space_boundary), Axis::Space, grid.nx, grid.dx)?,
                },
                None,
            ),
        };
        Ok(ResidualOperator {
            problem: *self,
            grid: *grid,
            ops,
            initial_velocity: time_first_for_velocity,
        })
    }
}

#[derive(Debug, Clone)]
enum ResidualOps {
    Wave { dtt: AxisOperator, dxx: AxisOperator },
    Reaction { dt: AxisOperator },
    Convection { dt: AxisOperator, dx: AxisOperator },
    Heat { dt: AxisOperator, dxx: AxisOperator },
}

/// Differentiable PDE residuals of a predicted field on a fixed grid.
#[derive(Debug, Clone)]
pub struct ResidualOperator {
    problem: PdeProblem,
    grid: Grid,
    ops: ResidualOps,
    initial_velocity: Option<AxisOperator>,
}

impl ResidualOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Spatial rows belonging to the interior region.
    pub fn interior_rows(&self) -> std::ops::Range<usize> {
        match self.grid.topology {
            Topology::Periodic => 0..self.grid.nx,
            Topology::Dirichlet => 1..self.grid.nx - 1,
        }
    }

    fn check_field(&self, tape: &Tape, field: Var) -> Result<(), BenchError> {
        let shape = tape.value(field).shape();
        if shape != self.grid.field_shape() {
            return Err(BenchError::GridMismatch(format!(
                "field shape {shape:?} does not match grid {:?}",
                self.grid.field_shape()
            )));
        }
        Ok(())
    }

    /// Interior PDE residual at time nodes `1..=M`: shape
    /// `interior rows × M`.
    pub fn interior(&self, tape: &mut Tape, field: Var) -> Result<Var, BenchError> {
        self.check_field(tape, field)?;
        let full = match &self.ops {
            ResidualOps::Wave { dtt, dxx } => {
                let utt = dtt.apply_var(tape, field)?;
                let uxx = dxx.apply_var(tape, field)?;
                let c2 = tape.scale(uxx, WAVE_SPEED * WAVE_SPEED)?;
                tape.sub(utt, c2)?
            }
            ResidualOps::Reaction { dt } => {
                // u_t − ρu + ρu²
                let ut = dt.apply_var(tape, field)?;
                let lin = tape.scale(field, REACTION_RATE)?;
                let sq = tape.square(field)?;
                let quad = tape.scale(sq, REACTION_RATE)?;
                let r = tape.sub(ut, lin)?;
                tape.add(r, quad)?
            }
            ResidualOps::Convection { dt, dx } => {
                let ut = dt.apply_var(tape, field)?;
                let ux = dx.apply_var(tape, field)?;
                let adv = tape.scale(ux, CONVECTION_SPEED)?;
                tape.add(ut, adv)?
            }
            ResidualOps::Heat { dt, dxx } => {
                let ut = dt.apply_var(tape, field)?;
                let uxx = dxx.apply_var(tape, field)?;
                let diff = tape.scale(uxx, HEAT_DIFFUSIVITY)?;
                tape.sub(ut, diff)?
            }
        };
        Ok(tape.slice(full, self.interior_rows(), 1..self.grid.steps + 1)?)
    }

    /// Deviation from the prescribed boundary values at time nodes `1..=M`,
    /// left end then right end: shape `1 × 2M`, or `None` for periodic problems (identically satisfied).
    pub fn boundary(&self, tape: &mut Tape, field: Var) -> Result<Option<Var>, BenchError> {
        self.check_field(tape, field)?;
        let BoundaryCondition::Dirichlet { left, right } = self.problem.bc else {
            return Ok(None);
        };
        let (nx, m) = (self.grid.nx, self.grid.steps);
        let l = tape.slice(field, 0..1, 1..m + 1)?;
        let r = tape.slice(field, nx - 1..nx, 1..m + 1)?;
        let l = tape.add_scalar(l, -left)?;
        let r = tape.add_scalar(r, -right)?;
        Ok(Some(tape.concat_cols(&[l, r])?))
    }

    /// Second-order one-sided `∂u/∂t` at `t0` for problems with a velocity
    /// initial condition (wave only): shape `Nx × 1`.
    pub fn initial_velocity(&self, tape: &mut Tape, field: Var) -> Result<Option<Var>, BenchError> {
        self.check_field(tape, field)?;
        let Some(op) = &self.initial_velocity else {
            return Ok(None);
        };
        let ut = op.apply_var(tape, field)?;
        Ok(Some(tape.slice(ut, 0..self.grid.nx, 0..1)?))
    }

    /// Interior residual of a plain field (no gradients), for diagnostics.
    pub fn evaluate(&self, field: &Tensor) -> Result<Tensor, BenchError> {
        let mut tape = Tape::new();
        let f = tape.constant(field.clone());
        let r = self.interior(&mut tape, f)?;
        Ok(tape.value(r).clone())
    }
}

/// Exact evolution map prepared for one grid.
pub enum FlowStepper {
    Pointwise,
    Shift(SpectralShift, f64),
    Sine(SineSeries, f64),
}

impl FlowStepper {
    pub fn step(&self, state: &[f64], dt: f64) -> Result<Vec<f64>, BenchError> {
        match self {
            FlowStepper::Pointwise => state.iter().map(|&u| logistic_flow(u, dt)).collect(),
            FlowStepper::Shift(s, l) => Ok(s.apply(state, CONVECTION_SPEED * dt, *l)),
            FlowStepper::Sine(s, l) => Ok(s.evolve(state, |k| {
                (-HEAT_DIFFUSIVITY * (k as f64 * PI / l).powi(2) * dt).exp()
            })),
        }
    }
}

/// Translation of periodic grid data by trigonometric interpolation.
pub struct SpectralShift {
    n: usize,
    forward: Arc<dyn rustfft::Fft<f64>>,
    inverse: Arc<dyn rustfft::Fft<f64>>,
}

impl SpectralShift {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// Returns samples of `v(x − shift)` for data on a period of length `period`.
    pub fn apply(&self, v: &[f64], shift: f64, period: f64) -> Vec<f64> {
        let n = self.n;
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        self.forward.process(&mut buf);
        let omega = 2.0 * PI / period;
        for (m, c) in buf.iter_mut().enumerate() {
            let k = if 2 * m < n { m as f64 } else { m as f64 - n as f64 };
            if 2 * m == n {
                // Nyquist mode: keep it real.
                *c *= (k.abs() * omega * shift).cos();
            } else {
                *c *= Complex::from_polar(1.0, -k * omega * shift);
            }
        }
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }
}

/// Sine-series (DST-I) representation of Dirichlet grid data with zero
/// boundary values, using the `n − 2` interior modes.
pub struct SineSeries {
    n: usize,
    /// basis[k-1][i-1] = sin(kπ i / (n − 1))
    basis: Vec<Vec<f64>>,
}

impl SineSeries {
    pub fn new(n: usize) -> Self {
        let intervals = (n - 1) as f64;
        let basis = (1..n - 1)
            .map(|k| {
                (1..n - 1)
                    .map(|i| (k as f64 * PI * i as f64 / intervals).sin())
                    .collect()
            })
            .collect();
        Self { n, basis }
    }

    /// Multiplies mode `k` (1-based) by `factor(k)`; boundary nodes are set
    /// to zero.
    pub fn evolve(&self, v: &[f64], factor: impl Fn(usize) -> f64) -> Vec<f64> {
        let interior = &v[1..self.n - 1];
        let scale = 2.0 / (self.n - 1) as f64;
        let coeffs: Vec<f64> = self
            .basis
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let b: f64 = row.iter().zip(interior).map(|(s, u)| s * u).sum();
                scale * b * factor(k + 1)
            })
            .collect();
        let mut out = vec![0.0; self.n];
        for (k, row) in self.basis.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                out[i + 1] += coeffs[k] * s;
            }
        }
        out
    }
}
