/// A sparse linear map `ℝⁿ → ℝⁿ` stored row by row.
///
/// Used for finite-difference stencils: row `i` lists the `(source index,
/// coefficient)` pairs that produce output `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn new(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let len = rows.len();
        assert!(rows.iter().flatten().all(|&(j, _)| j < len));
        Self { len, rows }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Applies the map to a strided 1-D view: `out[i·stride] = Σ c·inp[j·stride]`.
    pub(crate) fn apply_strided(&self, inp: &[f64], out: &mut [f64], offset: usize, stride: usize) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, c) in row {
                acc += c * inp[offset + j * stride];
            }
            out[offset + i * stride] = acc;
        }
    }

    /// Accumulates the transpose map: `out[j·stride] += Σ_i c_ij·inp[i·stride]`.
    pub(crate) fn apply_transpose_strided(
        &self,
        inp: &[f64],
        out: &mut [f64],
        offset: usize,
        stride: usize,
    ) {
        for (i, row) in self.rows.iter().enumerate() {
            let g = inp[offset + i * stride];
            if g == 0.0 {
                continue;
            }
            for &(j, c) in row {
                out[offset + j * stride] += c * g;
            }
        }
    }

    /// Dense matrix form, mainly for tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.len]; self.len];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, c) in row {
                m[i][j] += c;
            }
        }
        m
    }
}

/// Applies `map` along `axis` (0 = down columns, 1 = along rows) of a
/// row-major `rows × cols` buffer.
pub(crate) fn apply_along_axis(
    map: &SparseMap,
    axis: usize,
    rows: usize,
    cols: usize,
    inp: &[f64],
    out: &mut [f64],
) {
    if axis == 0 {
        for c in 0..cols {
            map.apply_strided(inp, out, c, cols);
        }
    } else {
        for r in 0..rows {
            map.apply_strided(inp, out, r * cols, 1);
        }
    }
}

pub(crate) fn apply_transpose_along_axis(
    map: &SparseMap,
    axis: usize,
    rows: usize,
    cols: usize,
    inp: &[f64],
    out: &mut [f64],
) {
    if axis == 0 {
        for c in 0..cols {
            map.apply_transpose_strided(inp, out, c, cols);
        }
    } else {
        for r in 0..rows {
            map.apply_transpose_strided(inp, out, r * cols, 1);
        }
    }
}
