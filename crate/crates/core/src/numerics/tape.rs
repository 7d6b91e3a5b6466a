use std::ops::Range;
use std::rc::Rc;

use super::sparse::{apply_along_axis, apply_transpose_along_axis, SparseMap};
use super::tensor::{gemm, Tensor};
use super::{sigmoid, silu, silu_grad, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a · op(b)`, `op(b) = bᵀ` when `trans_b`.
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Slice {
        a: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    AxisMap {
        a: Var,
        axis: usize,
        map: Rc<SparseMap>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation graph over tensors.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape is meant to live for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the differentiable leaves of a tape after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` is not a differentiable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`; panics if `v` is not a differentiable leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .expect("gradient requested for a node that is not a differentiable leaf")
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(NumericsError::Invalid {
            op,
            reason: format!("expected a matrix, got shape {s:?}"),
        }),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let g = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul { a, b, .. } => g(a) || g(b),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => g(a) || g(b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a) => g(a),
            Op::LayerNorm { x, gain, bias, .. } => g(x) || g(gain) || g(bias),
            Op::ConcatCols(vs) => vs.iter().any(g),
            Op::Slice { a, .. } | Op::AxisMap { a, .. } => g(a),
        }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; its adjoint is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ`; `b` is stored `n × k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (av, bv) = (self.val(a), self.val(b));
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        let (m, k) = matrix_dims("matmul", av).map_err(|_| mismatch())?;
        let (br, bc) = matrix_dims("matmul", bv).map_err(|_| mismatch())?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, out.data_mut(), false);
        self.push(out, Op::MatMul { a, b, trans_b }, "matmul")
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[r, c] + row[c]` for every row `r`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (av, rv) = (self.val(a), self.val(row));
        let (_, cols) = matrix_dims("add_row", av)?;
        if rv.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let bias = rv.data();
        let data = av
            .data()
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let out = self.val(a).map(f);
        self.push(out, op, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary(a, "scale", |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, "silu", silu, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.mul(a, a)
    }

    /// Layer normalization over the last axis of a vector or of each row of
    /// a matrix, with population variance.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let xv = self.val(x);
        let (rows, k) = xv.dims2();
        if xv.shape().len() > 2 {
            return Err(NumericsError::Invalid {
                op: "layer_norm",
                reason: format!("expected a vector or matrix, got {:?}", xv.shape()),
            });
        }
        if k < 2 {
            return Err(NumericsError::Invalid {
                op: "layer_norm",
                reason: format!("normalized width must be at least 2, got {k}"),
            });
        }
        let (gv, bv) = (self.val(gain), self.val(bias));
        if gv.len() != k || bv.len() != k {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut normed = vec![0.0; rows * k];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * k];
        let inv_k = 1.0 / k as f64;
        for r in 0..rows {
            let row = &xv.data()[r * k..(r + 1) * k];
            let mean = row.iter().sum::<f64>() * inv_k;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_k;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..k {
                let n = (row[c] - mean) * s;
                normed[r * k + c] = n;
                out[r * k + c] = n * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Invalid {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (rows, _) = matrix_dims("concat_cols", self.val(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.val(p))?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.val(*first).shape().to_vec(),
                    right: self.val(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.val(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Rectangular sub-block of a matrix.
    pub fn slice(
        &mut self,
        a: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Result<Var, NumericsError> {
        let av = self.val(a);
        let (r, c) = matrix_dims("slice", av)?;
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(NumericsError::Invalid {
                op: "slice",
                reason: format!("block {rows:?} × {cols:?} outside shape {r} × {c}"),
            });
        }
        let w = cols.len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for i in rows.clone() {
            data.extend_from_slice(&av.data()[i * c + cols.start..i * c + cols.end]);
        }
        let out = Tensor::matrix(rows.len(), w, data)?;
        self.push(out, Op::Slice { a, rows, cols }, "slice")
    }

    /// Applies a fixed linear map along one axis of a matrix (0 = along
    /// each column, 1 = along each row).
    pub fn axis_map(
        &mut self,
        a: Var,
        axis: usize,
        map: &Rc<SparseMap>,
    ) -> Result<Var, NumericsError> {
        let av = self.val(a);
        let (r, c) = matrix_dims("axis_map", av)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || extent != map.len() {
            return Err(NumericsError::Invalid {
                op: "axis_map",
                reason: format!(
                    "map of length {} cannot act on axis {axis} of shape {r} × {c}",
                    map.len()
                ),
            });
        }
        let mut out = Tensor::zeros(&[r, c]);
        apply_along_axis(map, axis, r, c, av.data(), out.data_mut());
        self.push(
            out,
            Op::AxisMap {
                a,
                axis,
                map: Rc::clone(map),
            },
            "axis_map",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.val(a);
        if v.is_empty() {
            return Err(NumericsError::Invalid {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Reverse sweep from a scalar `loss`. Every call starts from fresh
    /// zeroed adjoints.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            // Intermediate adjoints are not reported.
        }

        let grads = (0..self.nodes.len())
            .map(|i| {
                let node = &self.nodes[i];
                if node.needs_grad && matches!(node.op, Op::Leaf) {
                    let data = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = av.dims2();
                let n = node.value.cols();
                if needs(*a) {
                    // dA = G · op(b)ᵀ
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, bv.data(), !*trans_b, ga, true);
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    if *trans_b {
                        // b is n × k: dB = Gᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, gb, true);
                    } else {
                        // dB = Aᵀ · G
                        gemm(k, m, n, av.data(), true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if needs(*row) {
                    let cols = len(*row);
                    let gr = accumulate(&mut grads[row.0], cols);
                    for chunk in g.chunks_exact(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Silu(a) => {
                if needs(*a) {
                    let av = self.val(*a).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * silu_grad(av[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let yv = node.value.data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let yv = node.value.data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let k = len(*gain);
                let rows = rstd.len();
                let gain_v = self.val(*gain).data();
                if needs(*gain) {
                    let gg = accumulate(&mut grads[gain.0], k);
                    for r in 0..rows {
                        for c in 0..k {
                            gg[c] += g[r * k + c] * normed[r * k + c];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = accumulate(&mut grads[bias.0], k);
                    for r in 0..rows {
                        for c in 0..k {
                            gb[c] += g[r * k + c];
                        }
                    }
                }
                if needs(*x) {
                    let gx = accumulate(&mut grads[x.0], rows * k);
                    let inv_k = 1.0 / k as f64;
                    for r in 0..rows {
                        let gr = &g[r * k..(r + 1) * k];
                        let nr = &normed[r * k..(r + 1) * k];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..k {
                            let dn = gr[c] * gain_v[c];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[c];
                        }
                        mean_dn *= inv_k;
                        mean_dn_n *= inv_k;
                        for c in 0..k {
                            let dn = gr[c] * gain_v[c];
                            gx[r * k + c] += rstd[r] * (dn - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if needs(p) {
                        let gp = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { a, rows, cols } => {
                if needs(*a) {
                    let c = self.val(*a).cols();
                    let w = cols.len();
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    for (bi, i) in rows.clone().enumerate() {
                        for (bj, j) in cols.clone().enumerate() {
                            ga[i * c + j] += g[bi * w + bj];
                        }
                    }
                }
            }
            Op::AxisMap { a, axis, map } => {
                if needs(*a) {
                    let (r, c) = node.value.dims2();
                    let ga = accumulate(&mut grads[a.0], r * c);
                    apply_transpose_along_axis(map, *axis, r, c, g, ga);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = len(*a);
                    let ga = accumulate(&mut grads[a.0], n);
                    let s = g[0] / n as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }
}
