//! The autoregressive network: embedding, state-transition backbone and
//! probe.
//!
//! For each spatial node `x_i` the model consumes `(x_i, t_j, û(x_i, t_{j−1}))`
//! at every step, carries a hidden state through time, and emits
//! `û(x_i, t_j)`. All spatial nodes are processed as one batch (rows).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::Grid;
use crate::numerics::{NumericsError, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Coordinate inputs per node: `x` and `t`.
pub const COORD_DIM: usize = 2;
/// Solution components per node.
pub const SOLUTION_DIM: usize = 1;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown backbone '{0}' (expected ssm, gru, mlp or non-ar)")]
    UnknownBackbone(String),
    #[error("state dimension must be at least 2, got {0}")]
    BadStateDim(usize),
    #[error("rollout diverged at step {step}: {source}")]
    Diverged { step: usize, source: NumericsError },
    #[error("initial condition has {got} values, grid has {expected} nodes")]
    IcLength { expected: usize, got: usize },
    #[error("conditioning field has shape {got:?}, expected {expected:?}")]
    ConditioningShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("perturbation step {0} outside 1..=M")]
    PerturbationStep(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Ssm,
    Gru,
    Mlp,
    NonAr,
}

impl Backbone {
    pub const ALL: [Backbone; 4] = [Backbone::Ssm, Backbone::Gru, Backbone::Mlp, Backbone::NonAr];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Ssm => "ssm",
            Backbone::Gru => "gru",
            Backbone::Mlp => "mlp",
            Backbone::NonAr => "non-ar",
        }
    }

    pub fn is_autoregressive(self) -> bool {
        self != Backbone::NonAr
    }

    /// Width of the per-node input vector.
    pub fn input_dim(self) -> usize {
        if self.is_autoregressive() {
            COORD_DIM + SOLUTION_DIM
        } else {
            COORD_DIM
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ssm" => Ok(Backbone::Ssm),
            "gru" => Ok(Backbone::Gru),
            "mlp" => Ok(Backbone::Mlp),
            "non-ar" | "nonar" => Ok(Backbone::NonAr),
            other => Err(ModelError::UnknownBackbone(other.to_string())),
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Model parameters. Weight matrices are stored `out × in` and act on
/// row-vector batches as `x · Wᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PianoModel {
    backbone: Backbone,
    k: usize,
    params: Vec<Param>,
}

/// Named parameter layout of one backbone: `(name, shape, init)`.
#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

fn layout(backbone: Backbone, k: usize) -> Vec<(&'static str, Vec<usize>, Init)> {
    let mut l = vec![
        ("embed.weight", vec![k, backbone.input_dim()], Init::Xavier),
        ("embed.bias", vec![k], Init::Zeros),
    ];
    match backbone {
        Backbone::Ssm => l.extend([
            ("ssm.a", vec![k, k], Init::Xavier),
            ("ssm.b", vec![k, k], Init::Xavier),
            ("ssm.c", vec![k, k], Init::Xavier),
            ("ssm.d", vec![k, k], Init::Xavier),
            ("ssm.ln_gain", vec![k], Init::Ones),
            ("ssm.ln_bias", vec![k], Init::Zeros),
        ]),
        Backbone::Gru => l.extend([
            ("gru.w_z", vec![k, k], Init::Xavier),
            ("gru.u_z", vec![k, k], Init::Xavier),
            ("gru.b_z", vec![k], Init::Zeros),
            ("gru.w_r", vec![k, k], Init::Xavier),
            ("gru.u_r", vec![k, k], Init::Xavier),
            ("gru.b_r", vec![k], Init::Zeros),
            ("gru.w_h", vec![k, k], Init::Xavier),
            ("gru.u_h", vec![k, k], Init::Xavier),
            ("gru.b_h", vec![k], Init::Zeros),
        ]),
        Backbone::Mlp => l.extend([
            ("mlp.weight", vec![k, 2 * k], Init::Xavier),
            ("mlp.bias", vec![k], Init::Zeros),
        ]),
        Backbone::NonAr => {}
    }
    l.extend([
        ("probe.w1", vec![k, k], Init::Xavier),
        ("probe.b1", vec![k], Init::Zeros),
        ("probe.w2", vec![SOLUTION_DIM, k], Init::Xavier),
        ("probe.b2", vec![SOLUTION_DIM], Init::Zeros),
    ]);
    l
}

/// Xavier-uniform bound for a `fan_out × fan_in` weight.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl PianoModel {
    /// Fresh model with Xavier-uniform weights and zero biases.
    pub fn new(backbone: Backbone, k: usize, seed: u64) -> Result<Self, ModelError> {
        if k < 2 {
            return Err(ModelError::BadStateDim(k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(backbone, k)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier => {
                        let a = xavier_bound(shape[1], shape[0]);
                        (0..n).map(|_| rng.gen_range(-a..=a)).collect()
                    }
                };
                Param {
                    name: name.to_string(),
                    value: Tensor::new(shape, data).expect("layout shape"),
                }
            })
            .collect();
        Ok(Self { backbone, k, params })
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn state_dim(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Flattened copy of every parameter, in layout order.
    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            backbone: self.backbone,
            k: self.k,
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            backbone: self.backbone,
            k: self.k,
            coord_dim: COORD_DIM,
            solution_dim: SOLUTION_DIM,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ModelError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.coord_dim != COORD_DIM || ck.solution_dim != SOLUTION_DIM {
            return Err(ModelError::Checkpoint(format!(
                "dimensions d={} l={} do not match this build (d={COORD_DIM}, l={SOLUTION_DIM})",
                ck.coord_dim, ck.solution_dim
            )));
        }
        let expected = layout(ck.backbone, ck.k);
        if expected.len() != ck.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors for {} k={}, found {}",
                expected.len(),
                ck.backbone,
                ck.k,
                ck.params.len()
            )));
        }
        for ((name, shape, _), p) in expected.iter().zip(&ck.params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self {
            backbone: ck.backbone,
            k: ck.k,
            params: ck.params,
        })
    }
}

/// On-disk model manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub backbone: Backbone,
    pub k: usize,
    pub coord_dim: usize,
    pub solution_dim: usize,
    pub params: Vec<Param>,
}

/// Parameters registered on a tape, in layout order.
#[derive(Debug, Clone)]
pub struct Bound {
    backbone: Backbone,
    k: usize,
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn probe_base(&self) -> usize {
        self.vars.len() - 4
    }

    /// Affine embedding of `batch × input_dim` inputs.
    pub fn embed(&self, tape: &mut Tape, s: Var) -> Result<Var, ModelError> {
        let width = tape.value(s).cols();
        if width != self.backbone.input_dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "embed",
                left: tape.value(s).shape().to_vec(),
                right: tape.value(self.v(0)).shape().to_vec(),
            }
            .into());
        }
        let m = tape.matmul_nt(s, self.v(0))?;
        Ok(tape.add_row(m, self.v(1))?)
    }

    /// `h = silu(LN(A h_prev + B m))`, `o = C h + D m + m`.
    pub fn step_ssm(&self, tape: &mut Tape, h_prev: Var, m: Var) -> Result<(Var, Var), ModelError> {
        let [a, b, c, d, g, beta] = [2, 3, 4, 5, 6, 7].map(|i| self.v(i));
        let ah = tape.matmul_nt(h_prev, a)?;
        let bm = tape.matmul_nt(m, b)?;
        let pre = tape.add(ah, bm)?;
        let normed = tape.layer_norm(pre, g, beta, LAYER_NORM_EPS)?;
        let h = tape.silu(normed)?;
        let ch = tape.matmul_nt(h, c)?;
        let dm = tape.matmul_nt(m, d)?;
        let o = tape.add(ch, dm)?;
        let o = tape.add(o, m)?;
        Ok((h, o))
    }

    /// Gated recurrent update with `o = h`.
    pub fn step_gru(&self, tape: &mut Tape, h_prev: Var, m: Var) -> Result<(Var, Var), ModelError> {
        let [wz, uz, bz, wr, ur, br, wh, uh, bh] = [2, 3, 4, 5, 6, 7, 8, 9, 10].map(|i| self.v(i));
        let gate = |tape: &mut Tape, w, u, b, h| -> Result<Var, NumericsError> {
            let x = tape.matmul_nt(m, w)?;
            let y = tape.matmul_nt(h, u)?;
            let s = tape.add(x, y)?;
            tape.add_row(s, b)
        };
        let z = gate(tape, wz, uz, bz, h_prev)?;
        let z = tape.sigmoid(z)?;
        let r = gate(tape, wr, ur, br, h_prev)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h_prev)?;
        let cand = gate(tape, wh, uh, bh, rh)?;
        let cand = tape.tanh(cand)?;
        // h = z ⊙ h_prev + (1 − z) ⊙ cand
        let keep = tape.mul(z, h_prev)?;
        let zc = tape.mul(z, cand)?;
        let fresh = tape.sub(cand, zc)?;
        let h = tape.add(keep, fresh)?;
        Ok((h, h))
    }

    /// `h = silu(W [h_prev, m] + b)` with `o = h`.
    pub fn step_mlp(&self, tape: &mut Tape, h_prev: Var, m: Var) -> Result<(Var, Var), ModelError> {
        let cat = tape.concat_cols(&[h_prev, m])?;
        let pre = tape.matmul_nt(cat, self.v(2))?;
        let pre = tape.add_row(pre, self.v(3))?;
        let h = tape.silu(pre)?;
        Ok((h, h))
    }

    pub fn step(&self, tape: &mut Tape, h_prev: Var, m: Var) -> Result<(Var, Var), ModelError> {
        match self.backbone {
            Backbone::Ssm => self.step_ssm(tape, h_prev, m),
            Backbone::Gru => self.step_gru(tape, h_prev, m),
            Backbone::Mlp => self.step_mlp(tape, h_prev, m),
            Backbone::NonAr => Ok((h_prev, m)),
        }
    }

    /// Two-layer SiLU probe mapping `batch × k` to `batch × 1`.
    pub fn probe(&self, tape: &mut Tape, o: Var) -> Result<Var, ModelError> {
        let base = self.probe_base();
        let [w1, b1, w2, b2] = [0, 1, 2, 3].map(|i| self.v(base + i));
        let z = tape.matmul_nt(o, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.silu(z)?;
        let u = tape.matmul_nt(z, w2)?;
        Ok(tape.add_row(u, b2)?)
    }

    /// Autoregressive rollout on the tape. Returns the `Nx × (M+1)` field
    /// (column 0 is `ic`) and the final hidden state, if any.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        grid: &Grid,
        ic: Var,
        conditioning: Conditioning<'_>,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let nx = grid.nx;
        let ic_shape = tape.value(ic).shape().to_vec();
        if ic_shape != [nx, 1] {
            return Err(ModelError::IcLength {
                expected: nx,
                got: tape.value(ic).len(),
            });
        }
        match conditioning {
            Conditioning::Teacher(field) if field.shape() != grid.field_shape() => {
                return Err(ModelError::ConditioningShape {
                    expected: grid.field_shape().to_vec(),
                    got: field.shape().to_vec(),
                })
            }
            Conditioning::Perturb { step, delta } => {
                if step == 0 || step > grid.steps {
                    return Err(ModelError::PerturbationStep(step));
                }
                if delta.len() != nx {
                    return Err(ModelError::IcLength {
                        expected: nx,
                        got: delta.len(),
                    });
                }
            }
            _ => {}
        }

        let xs = tape.constant(Tensor::column(grid.xs()));
        let mut hidden = self
            .backbone
            .is_autoregressive()
            .then(|| tape.constant(Tensor::zeros(&[nx, self.k])));
        let mut columns = Vec::with_capacity(grid.steps + 1);
        columns.push(ic);
        let mut prev = ic;
        for j in 1..=grid.steps {
            let diverged = |source| ModelError::Diverged { step: j, source };
            let ts = tape.constant(Tensor::column(vec![grid.t(j); nx]));
            let s = if self.backbone.is_autoregressive() {
                let feed = match conditioning {
                    Conditioning::Teacher(field) => {
                        tape.constant(Tensor::column(field.column_values(j - 1)))
                    }
                    _ => prev,
                };
                tape.concat_cols(&[xs, ts, feed])
            } else {
                tape.concat_cols(&[xs, ts])
            }
            .map_err(diverged)?;
            let m = self.embed(tape, s).map_err(|e| lift(e, j))?;
            let o = match hidden {
                Some(h) => {
                    let (h, o) = self.step(tape, h, m).map_err(|e| lift(e, j))?;
                    hidden = Some(h);
                    o
                }
                None => m,
            };
            let mut u = self.probe(tape, o).map_err(|e| lift(e, j))?;
            if let Conditioning::Perturb { step, delta } = conditioning {
                if step == j {
                    let d = tape.constant(Tensor::column(delta.to_vec()));
                    u = tape.add(u, d).map_err(diverged)?;
                }
            }
            columns.push(u);
            prev = u;
        }
        let field = tape.concat_cols(&columns)?;
        Ok((field, hidden))
    }
}

fn lift(e: ModelError, step: usize) -> ModelError {
    match e {
        ModelError::Numerics(source @ NumericsError::NonFinite { .. }) => {
            ModelError::Diverged { step, source }
        }
        other => other,
    }
}

/// What the model is fed as the previous solution value at each step.
#[derive(Debug, Clone, Copy, Default)]
pub enum Conditioning<'a> {
    /// Its own previous prediction.
    #[default]
    Free,
    /// Column `j − 1` of a given field (teacher forcing).
    Teacher(&'a Tensor),
    /// Its own predictions, with `delta` added to the prediction at `step`
    /// before it is recorded and fed forward.
    Perturb { step: usize, delta: &'a [f64] },
}

/// Predicted field and final hidden state of a rollout.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub field: Tensor,
    pub hidden: Option<Tensor>,
}

/// Forward-only rollout from a plain initial condition.
pub fn rollout(
    model: &PianoModel,
    grid: &Grid,
    ic: &[f64],
    conditioning: Conditioning<'_>,
) -> Result<RolloutResult, ModelError> {
    if ic.len() != grid.nx {
        return Err(ModelError::IcLength {
            expected: grid.nx,
            got: ic.len(),
        });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let ic = tape.constant(Tensor::column(ic.to_vec()));
    let (field, hidden) = bound.rollout(&mut tape, grid, ic, conditioning)?;
    Ok(RolloutResult {
        field: tape.value(field).clone(),
        hidden: hidden.map(|h| tape.value(h).clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::make_reaction;
    use crate::numerics::{sigmoid, silu};

    fn mat_vec(w: &Tensor, v: &[f64]) -> Vec<f64> {
        let (r, c) = w.dims2();
        (0..r).map(|i| (0..c).map(|j| w.at(i, j) * v[j]).sum()).collect()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize(model: &mut PianoModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = random_tensor(&mut rng, &shape);
        }
    }

    #[test]
    fn parameter_count_matches_reference_scale() {
        let m = PianoModel::new(Backbone::Ssm, 256, 0).unwrap();
        let n = m.parameter_count();
        assert_eq!(n, 329_729);
        assert!((n as f64 - 330_000.0).abs() / 330_000.0 < 0.10);
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        for bb in Backbone::ALL {
            let m = PianoModel::new(bb, 16, 3).unwrap();
            for p in m.params() {
                if p.name.contains("bias") || p.name.contains(".b") {
                    if p.name != "ssm.b" {
                        assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
                    }
                    continue;
                }
                if p.name.contains("ln_gain") {
                    continue;
                }
                let s = p.value.shape();
                let a = xavier_bound(s[1], s[0]);
                assert!(p.value.data().iter().all(|v| v.abs() <= a), "{}", p.name);
            }
        }
    }

    #[test]
    fn backbone_names() {
        for b in Backbone::ALL {
            assert_eq!(b.name().parse::<Backbone>().unwrap(), b);
        }
        assert!("lstm".parse::<Backbone>().is_err());
    }

    #[test]
    fn embed_cases() {
        let mut m = PianoModel::new(Backbone::Ssm, 3, 0).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let e = b.embed(&mut tape, zero).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));

        let w = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
        *m.param_mut("embed.weight").unwrap() = w;
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let basis = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap());
        let e = b.embed(&mut tape, basis).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 4.0, 7.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(b.embed(&mut tape, bad).is_err());
    }

    #[test]
    fn embed_matches_direct_affine_formula() {
        let mut m = PianoModel::new(Backbone::Gru, 5, 0).unwrap();
        randomize(&mut m, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_tensor(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let sv = tape.constant(s.clone());
        let e = b.embed(&mut tape, sv).unwrap();
        let (w, bias) = (m.param("embed.weight").unwrap(), m.param("embed.bias").unwrap());
        for r in 0..4 {
            let row: Vec<f64> = (0..3).map(|c| s.at(r, c)).collect();
            let direct = mat_vec(w, &row);
            for c in 0..5 {
                assert!((tape.value(e).at(r, c) - direct[c] - bias.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssm_special_cases() {
        let mut m = PianoModel::new(Backbone::Ssm, 4, 0).unwrap();
        for name in ["ssm.a", "ssm.b", "ssm.c", "ssm.d"] {
            m.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h0 = tape.constant(random_tensor(&mut rng, &[2, 4]));
        let mv = tape.constant(random_tensor(&mut rng, &[2, 4]));
        let (h, o) = b.step_ssm(&mut tape, h0, mv).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(o), tape.value(mv));
    }

    #[test]
    fn ssm_matches_scalar_loop() {
        let mut m = PianoModel::new(Backbone::Ssm, 4, 0).unwrap();
        randomize(&mut m, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h0 = random_tensor(&mut rng, &[2, 4]);
        let mv = random_tensor(&mut rng, &[2, 4]);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let (hv, mvv) = (tape.constant(h0.clone()), tape.constant(mv.clone()));
        let (h, o) = b.step_ssm(&mut tape, hv, mvv).unwrap();
        let p = |n: &str| m.param(n).unwrap();
        for r in 0..2 {
            let hrow: Vec<f64> = (0..4).map(|c| h0.at(r, c)).collect();
            let mrow: Vec<f64> = (0..4).map(|c| mv.at(r, c)).collect();
            let ah = mat_vec(p("ssm.a"), &hrow);
            let bm = mat_vec(p("ssm.b"), &mrow);
            let pre: Vec<f64> = (0..4).map(|i| ah[i] + bm[i]).collect();
            let mean = pre.iter().sum::<f64>() / 4.0;
            let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            let hnew: Vec<f64> = (0..4)
                .map(|i| {
                    let n = (pre[i] - mean) / (var + LAYER_NORM_EPS).sqrt();
                    silu(n * p("ssm.ln_gain").data()[i] + p("ssm.ln_bias").data()[i])
                })
                .collect();
            let ch = mat_vec(p("ssm.c"), &hnew);
            let dm = mat_vec(p("ssm.d"), &mrow);
            for i in 0..4 {
                assert!((tape.value(h).at(r, i) - hnew[i]).abs() < 1e-12);
                assert!((tape.value(o).at(r, i) - (ch[i] + dm[i] + mrow[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_cases_and_loop_oracle() {
        let k = 3;
        let mut m = PianoModel::new(Backbone::Gru, k, 0).unwrap();
        randomize(&mut m, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h0 = random_tensor(&mut rng, &[2, k]);
        let mv = random_tensor(&mut rng, &[2, k]);
        let p = |m: &PianoModel, n: &str| m.param(n).unwrap().clone();
        let eval = |m: &PianoModel, h0: &Tensor| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let (hv, mvv) = (tape.constant(h0.clone()), tape.constant(mv.clone()));
            let (h, o) = b.step_gru(&mut tape, hv, mvv).unwrap();
            assert_eq!(tape.value(h), tape.value(o));
            tape.value(h).clone()
        };
        let h = eval(&m, &h0);
        for r in 0..2 {
            let hr: Vec<f64> = (0..k).map(|c| h0.at(r, c)).collect();
            let mr: Vec<f64> = (0..k).map(|c| mv.at(r, c)).collect();
            let lin = |w: &str, u: &str, b: &str, hh: &[f64]| {
                let (a, c) = (mat_vec(&p(&m, w), &mr), mat_vec(&p(&m, u), hh));
                (0..k).map(|i| a[i] + c[i] + p(&m, b).data()[i]).collect::<Vec<_>>()
            };
            let z: Vec<f64> = lin("gru.w_z", "gru.u_z", "gru.b_z", &hr).into_iter().map(sigmoid).collect();
            let rg: Vec<f64> = lin("gru.w_r", "gru.u_r", "gru.b_r", &hr).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = (0..k).map(|i| rg[i] * hr[i]).collect();
            let cand: Vec<f64> = lin("gru.w_h", "gru.u_h", "gru.b_h", &rh).into_iter().map(f64::tanh).collect();
            for i in 0..k {
                let expected = z[i] * hr[i] + (1.0 - z[i]) * cand[i];
                assert!((h.at(r, i) - expected).abs() < 1e-12);
            }
        }

        // saturated update gate keeps the previous state
        let mut sat = m.clone();
        sat.param_mut("gru.b_z").unwrap().data_mut().fill(50.0);
        let h = eval(&sat, &h0);
        assert!(h.max_abs_diff(&h0) < 1e-12);

        // zero state: h = (1 − z) ⊙ tanh(W_h m + b_h)
        let zero = Tensor::zeros(&[2, k]);
        let h = eval(&m, &zero);
        for r in 0..2 {
            let mr: Vec<f64> = (0..k).map(|c| mv.at(r, c)).collect();
            let wz = mat_vec(&p(&m, "gru.w_z"), &mr);
            let wh = mat_vec(&p(&m, "gru.w_h"), &mr);
            for i in 0..k {
                let z = sigmoid(wz[i] + p(&m, "gru.b_z").data()[i]);
                let c = (wh[i] + p(&m, "gru.b_h").data()[i]).tanh();
                assert!((h.at(r, i) - (1.0 - z) * c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_cases() {
        let k = 2;
        let mut m = PianoModel::new(Backbone::Mlp, k, 0).unwrap();
        m.param_mut("mlp.bias").unwrap().data_mut().copy_from_slice(&[0.5, -2.0]);
        let eval = |m: &PianoModel, h0: Vec<f64>, mv: Vec<f64>| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let hv = tape.constant(Tensor::matrix(1, k, h0).unwrap());
            let mvv = tape.constant(Tensor::matrix(1, k, mv).unwrap());
            let (h, _) = b.step_mlp(&mut tape, hv, mvv).unwrap();
            tape.value(h).data().to_vec()
        };
        assert_eq!(eval(&m, vec![0.0; 2], vec![0.0; 2]), vec![silu(0.5), silu(-2.0)]);
        // W = [I | 2I]: h_prev enters first, m second
        let mut w = Tensor::zeros(&[k, 2 * k]);
        for i in 0..k {
            w.set(i, i, 1.0);
            w.set(i, k + i, 2.0);
        }
        *m.param_mut("mlp.weight").unwrap() = w;
        m.param_mut("mlp.bias").unwrap().data_mut().fill(0.0);
        assert_eq!(eval(&m, vec![1.0, 0.0], vec![0.0, 0.0]), vec![silu(1.0), 0.0]);
        assert_eq!(eval(&m, vec![0.0, 0.0], vec![1.0, 0.0]), vec![silu(2.0), 0.0]);
    }

    #[test]
    fn zero_probe_rolls_out_zeros_after_ic() {
        let p = make_reaction();
        let s = p.sample_grid(6, 5).unwrap();
        for bb in Backbone::ALL {
            let mut m = PianoModel::new(bb, 4, 1).unwrap();
            m.param_mut("probe.w2").unwrap().data_mut().fill(0.0);
            let r = rollout(&m, &s.grid, &s.ic, Conditioning::Free).unwrap();
            assert_eq!(r.field.column_values(0), s.ic);
            for j in 1..=5 {
                assert!(r.field.column_values(j).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn single_step_unrolling() {
        let p = make_reaction();
        let s = p.sample_grid(5, 4).unwrap();
        let m = PianoModel::new(Backbone::Ssm, 4, 7).unwrap();
        let r = rollout(&m, &s.grid, &s.ic, Conditioning::Free).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let inp: Vec<f64> = (0..5)
            .flat_map(|i| [s.grid.x(i), s.grid.t(1), s.ic[i]])
            .collect();
        let sv = tape.constant(Tensor::matrix(5, 3, inp).unwrap());
        let e = b.embed(&mut tape, sv).unwrap();
        let h0 = tape.constant(Tensor::zeros(&[5, 4]));
        let (_, o) = b.step(&mut tape, h0, e).unwrap();
        let u = b.probe(&mut tape, o).unwrap();
        assert_eq!(tape.value(u).data(), r.field.column_values(1).as_slice());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let m = PianoModel::new(Backbone::Gru, 4, 2).unwrap();
        let back = PianoModel::from_checkpoint(m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
        let mut ck = m.to_checkpoint();
        ck.version = 99;
        assert!(PianoModel::from_checkpoint(ck).is_err());
        let mut ck = m.to_checkpoint();
        ck.params.pop();
        assert!(PianoModel::from_checkpoint(ck).is_err());
    }

    #[test]
    fn bad_inputs_rejected() {
        let p = make_reaction();
        let s = p.sample_grid(6, 5).unwrap();
        let m = PianoModel::new(Backbone::Ssm, 4, 1).unwrap();
        assert!(matches!(
            rollout(&m, &s.grid, &s.ic[..3], Conditioning::Free),
            Err(ModelError::IcLength { .. })
        ));
        let wrong = Tensor::zeros(&[6, 3]);
        assert!(rollout(&m, &s.grid, &s.ic, Conditioning::Teacher(&wrong)).is_err());
        assert!(PianoModel::new(Backbone::Ssm, 1, 0).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let p = make_reaction();
        let s = p.sample_grid(6, 5).unwrap();
        let mut m = PianoModel::new(Backbone::Mlp, 4, 1).unwrap();
        m.param_mut("probe.b2").unwrap().data_mut().fill(1e300);
        m.param_mut("embed.weight").unwrap().data_mut().fill(1e300);
        let err = rollout(&m, &s.grid, &s.ic, Conditioning::Free).unwrap_err();
        assert!(matches!(err, ModelError::Diverged { step: 2, .. }), "{err}");
    }
}
