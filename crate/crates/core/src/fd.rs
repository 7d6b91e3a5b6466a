//! Finite-difference derivative operators on the `Nx × (M+1)` solution grid.
//!
//! Axis 0 runs over spatial nodes (rows), axis 1 over time nodes (columns).
//! Each operator is a fixed sparse linear map, so the same object serves
//! plain evaluation and the differentiable tape op (whose adjoint is the
//! transposed map).

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{apply_along_axis, NumericsError, SparseMap, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StencilError {
    #[error("{needed} nodes needed along the axis, got {got}")]
    TooFewNodes { needed: usize, got: usize },
    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("unsupported stencil: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which derivative a stencil approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Derivative {
    First,
    Second,
}

/// Closure at the ends of the axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    OneSided,
    PeriodicWrap,
}

/// Formal accuracy order of a stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Accuracy {
    First,
    Second,
}

impl Accuracy {
    pub fn from_order(order: u8) -> Option<Self> {
        match order {
            1 => Some(Self::First),
            2 => Some(Self::Second),
            _ => None,
        }
    }

    pub fn order(self) -> u8 {
        match self {
            Self::First => 1,
            Self::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StencilSpec {
    pub derivative: Derivative,
    pub accuracy: Accuracy,
    pub boundary: Boundary,
}

impl StencilSpec {
    pub fn new(derivative: Derivative, accuracy: Accuracy, boundary: Boundary) -> Self {
        Self {
            derivative,
            accuracy,
            boundary,
        }
    }

    /// Minimum number of nodes along the axis.
    pub fn min_nodes(&self) -> usize {
        match (self.derivative, self.accuracy, self.boundary) {
            (_, _, Boundary::PeriodicWrap) => 3,
            (Derivative::First, Accuracy::First, Boundary::OneSided) => 2,
            (Derivative::First, Accuracy::Second, Boundary::OneSided) => 3,
            (Derivative::Second, _, Boundary::OneSided) => 4,
        }
    }

    /// Builds the sparse operator for `n` nodes spaced `h` apart.
    ///
    /// Second derivatives always use the central 3-point stencil (with
    /// 4-point one-sided edges); the accuracy flag only affects first
    /// derivatives.
    pub fn build(&self, n: usize, h: f64) -> Result<SparseMap, StencilError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(StencilError::BadStep(h));
        }
        let needed = self.min_nodes();
        if n < needed {
            return Err(StencilError::TooFewNodes { needed, got: n });
        }
        let wrap = |i: isize| i.rem_euclid(n as isize) as usize;
        let rows = match (self.derivative, self.accuracy, self.boundary) {
            (Derivative::First, Accuracy::Second, Boundary::OneSided) => {
                let c = 1.0 / (2.0 * h);
                (0..n)
                    .map(|i| {
                        if i == 0 {
                            vec![(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
                        } else if i == n - 1 {
                            vec![(n - 1, 3.0 * c), (n - 2, -4.0 * c), (n - 3, c)]
                        } else {
                            vec![(i - 1, -c), (i + 1, c)]
                        }
                    })
                    .collect()
            }
            (Derivative::First, Accuracy::Second, Boundary::PeriodicWrap) => {
                let c = 1.0 / (2.0 * h);
                (0..n as isize)
                    .map(|i| vec![(wrap(i - 1), -c), (wrap(i + 1), c)])
                    .collect()
            }
            (Derivative::First, Accuracy::First, Boundary::OneSided) => {
                let c = 1.0 / h;
                (0..n)
                    .map(|i| {
                        if i == n - 1 {
                            vec![(n - 2, -c), (n - 1, c)]
                        } else {
                            vec![(i, -c), (i + 1, c)]
                        }
                    })
                    .collect()
            }
            (Derivative::First, Accuracy::First, Boundary::PeriodicWrap) => {
                let c = 1.0 / h;
                (0..n as isize)
                    .map(|i| vec![(wrap(i), -c), (wrap(i + 1), c)])
                    .collect()
            }
            (Derivative::Second, _, Boundary::OneSided) => {
                let c = 1.0 / (h * h);
                (0..n)
                    .map(|i| {
                        if i == 0 {
                            vec![(0, 2.0 * c), (1, -5.0 * c), (2, 4.0 * c), (3, -c)]
                        } else if i == n - 1 {
                            vec![
                                (n - 1, 2.0 * c),
                                (n - 2, -5.0 * c),
                                (n - 3, 4.0 * c),
                                (n - 4, -c),
                            ]
                        } else {
                            vec![(i - 1, c), (i, -2.0 * c), (i + 1, c)]
                        }
                    })
                    .collect()
            }
            (Derivative::Second, _, Boundary::PeriodicWrap) => {
                let c = 1.0 / (h * h);
                (0..n as isize)
                    .map(|i| vec![(wrap(i - 1), c), (i as usize, -2.0 * c), (wrap(i + 1), c)])
                    .collect()
            }
        };
        Ok(SparseMap::new(rows))
    }
}

/// Grid axis a derivative acts along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Space,
    Time,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::Space => 0,
            Axis::Time => 1,
        }
    }
}

/// A stencil bound to a grid axis, with its sparse map built once.
#[derive(Debug, Clone)]
pub struct AxisOperator {
    axis: Axis,
    map: Rc<SparseMap>,
}

impl AxisOperator {
    pub fn new(spec: StencilSpec, axis: Axis, nodes: usize, step: f64) -> Result<Self, StencilError> {
        Ok(Self {
            axis,
            map: Rc::new(spec.build(nodes, step)?),
        })
    }

    pub fn apply(&self, field: &Tensor) -> Result<Tensor, StencilError> {
        let (rows, cols) = check_field(field)?;
        let extent = if self.axis == Axis::Space { rows } else { cols };
        if extent != self.map.len() {
            return Err(StencilError::TooFewNodes {
                needed: self.map.len(),
                got: extent,
            });
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        apply_along_axis(&self.map, self.axis.index(), rows, cols, field.data(), out.data_mut());
        Ok(out)
    }

    pub fn apply_var(&self, tape: &mut Tape, field: Var) -> Result<Var, StencilError> {
        Ok(tape.axis_map(field, self.axis.index(), &self.map)?)
    }

    pub fn map(&self) -> &SparseMap {
        &self.map
    }
}

fn check_field(field: &Tensor) -> Result<(usize, usize), StencilError> {
    match field.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(StencilError::Unsupported(format!(
            "field must be a matrix, got shape {s:?}"
        ))),
    }
}

fn first_spec(spec: StencilSpec) -> StencilSpec {
    StencilSpec {
        derivative: Derivative::First,
        ..spec
    }
}

/// First derivative in time of an `Nx × (M+1)` field.
pub fn diff_time(field: &Tensor, dt: f64, spec: StencilSpec) -> Result<Tensor, StencilError> {
    let (_, cols) = check_field(field)?;
    AxisOperator::new(first_spec(spec), Axis::Time, cols, dt)?.apply(field)
}

/// First derivative in space of an `Nx × (M+1)` field.
pub fn diff_space(field: &Tensor, dx: f64, spec: StencilSpec) -> Result<Tensor, StencilError> {
    let (rows, _) = check_field(field)?;
    AxisOperator::new(first_spec(spec), Axis::Space, rows, dx)?.apply(field)
}

/// Second derivative along `axis`.
pub fn second_derivative(
    field: &Tensor,
    step: f64,
    axis: Axis,
    spec: StencilSpec,
) -> Result<Tensor, StencilError> {
    let (rows, cols) = check_field(field)?;
    let n = if axis == Axis::Space { rows } else { cols };
    let spec = StencilSpec {
        derivative: Derivative::Second,
        ..spec
    };
    AxisOperator::new(spec, axis, n, step)?.apply(field)
}
