//! Compressed sparse row storage and the handful of kernels the solver needs.

use crate::exec;
use crate::{Error, Result};

/// Immutable CSR matrix with `f64` values.
///
/// Column indices are strictly increasing within a row and every value is
/// finite. Duplicate columns are rejected rather than summed.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

/// Borrowed view of one sparse row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseRow<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f64],
}

/// Owned sparse vector, sorted by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl<'a> SparseRow<'a> {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.indices
            .iter()
            .zip(self.values)
            .map(|(&j, &v)| (j as usize, v))
    }

    /// Dot product with a dense vector. Entries past the end of `dense` count as zero.
    #[inline]
    pub fn dot(&self, dense: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&j, &v) in self.indices.iter().zip(self.values) {
            if let Some(w) = dense.get(j as usize) {
                acc += v * w;
            }
        }
        acc
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `dense += alpha * self`, ignoring entries past the end of `dense`.
    #[inline]
    pub fn axpy_into(&self, alpha: f64, dense: &mut [f64]) {
        for (&j, &v) in self.indices.iter().zip(self.values) {
            if let Some(slot) = dense.get_mut(j as usize) {
                *slot += alpha * v;
            }
        }
    }

    pub fn to_owned(&self) -> SparseVec {
        SparseVec {
            indices: self.indices.to_vec(),
            values: self.values.to_vec(),
        }
    }
}

impl SparseVec {
    pub fn as_row(&self) -> SparseRow<'_> {
        SparseRow {
            indices: &self.indices,
            values: &self.values,
        }
    }

    /// Builds a sparse vector from `(index, value)` pairs, which must be
    /// strictly increasing in index.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let mut out = SparseVec::default();
        for (j, v) in pairs {
            if let Some(&last) = out.indices.last() {
                if j <= last {
                    return Err(Error::InvalidMatrix(format!(
                        "indices not strictly increasing ({last} then {j})"
                    )));
                }
            }
            out.indices.push(j);
            out.values.push(v);
        }
        Ok(out)
    }
}

impl CsrMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = CsrMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// Stacks rows given as `(index, value)` lists.
    pub fn from_rows<R, I>(n_cols: usize, rows: R) -> Result<Self>
    where
        R: IntoIterator<Item = I>,
        I: IntoIterator<Item = (u32, f64)>,
    {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (j, v) in row {
                col_indices.push(j);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Self::new(row_offsets.len() - 1, n_cols, row_offsets, col_indices, values)
    }

    /// Dense row-major input; exact zeros are dropped.
    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch {
                expected: n_rows * n_cols,
                actual: dense.len(),
                context: "dense buffer",
            });
        }
        Self::from_rows(
            n_cols,
            dense.chunks(n_cols.max(1)).take(n_rows).map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, &v)| (j as u32, v))
                    .collect::<Vec<_>>()
            }),
        )
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidMatrix(msg));
        if self.row_offsets.len() != self.n_rows + 1 {
            return bad(format!(
                "row_offsets has length {}, expected {}",
                self.row_offsets.len(),
                self.n_rows + 1
            ));
        }
        if self.row_offsets[0] != 0 {
            return bad("row_offsets[0] != 0".into());
        }
        let nnz = self.values.len();
        if self.col_indices.len() != nnz || self.row_offsets[self.n_rows] != nnz {
            return bad(format!(
                "inconsistent lengths: offsets end at {}, {} indices, {} values",
                self.row_offsets[self.n_rows],
                self.col_indices.len(),
                nnz
            ));
        }
        for i in 0..self.n_rows {
            let (s, e) = (self.row_offsets[i], self.row_offsets[i + 1]);
            if e < s {
                return bad(format!("row_offsets decreases at row {i}"));
            }
            let cols = &self.col_indices[s..e];
            for (t, &j) in cols.iter().enumerate() {
                if j as usize >= self.n_cols {
                    return bad(format!("row {i}: column {j} out of range {}", self.n_cols));
                }
                if t > 0 && cols[t - 1] >= j {
                    return bad(format!(
                        "row {i}: columns not strictly increasing ({} then {j})",
                        cols[t - 1]
                    ));
                }
            }
            if let Some(v) = self.values[s..e].iter().find(|v| !v.is_finite()) {
                return bad(format!("row {i}: non-finite value {v}"));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let (s, e) = (self.row_offsets[i], self.row_offsets[i + 1]);
        SparseRow {
            indices: &self.col_indices[s..e],
            values: &self.values[s..e],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = SparseRow<'_>> {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    /// Row-major dense copy; meant for tests and small diagnostics.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            for (j, v) in self.row(i).iter() {
                out[i * self.n_cols + j] = v;
            }
        }
        out
    }

    /// Same matrix with a wider column space.
    pub fn with_n_cols(mut self, n_cols: usize) -> Result<Self> {
        if n_cols < self.n_cols && self.col_indices.iter().any(|&j| j as usize >= n_cols) {
            return Err(Error::InvalidMatrix(format!(
                "cannot shrink to {n_cols} columns: entries out of range"
            )));
        }
        self.n_cols = n_cols;
        Ok(self)
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> CsrMatrix {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for &i in rows {
            let r = self.row(i);
            col_indices.extend_from_slice(r.indices);
            values.extend_from_slice(r.values);
            row_offsets.push(col_indices.len());
        }
        CsrMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Applies `f` to every stored value, keeping the sparsity pattern.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<CsrMatrix> {
        CsrMatrix::new(
            self.n_rows,
            self.n_cols,
            self.row_offsets.clone(),
            self.col_indices.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Rescales each row by `scale[i]`.
    pub fn scale_rows(&self, scale: &[f64]) -> Result<CsrMatrix> {
        if scale.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                actual: scale.len(),
                context: "row scale",
            });
        }
        let mut values = self.values.clone();
        for i in 0..self.n_rows {
            for v in &mut values[self.row_offsets[i]..self.row_offsets[i + 1]] {
                *v *= scale[i];
            }
        }
        CsrMatrix::new(
            self.n_rows,
            self.n_cols,
            self.row_offsets.clone(),
            self.col_indices.clone(),
            values,
        )
    }
}

/// `M · v`.
pub fn spmv(m: &CsrMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.n_cols {
        return Err(Error::DimensionMismatch {
            expected: m.n_cols,
            actual: v.len(),
            context: "spmv vector",
        });
    }
    let mut out = vec![0.0; m.n_rows];
    exec::fill(&mut out, 2048, |i| m.row(i).dot(v));
    Ok(out)
}

/// `Mᵀ · diag(q) · v`.
pub fn spmv_t_weighted(m: &CsrMatrix, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    for (len, context) in [(q.len(), "weights"), (v.len(), "spmv_t vector")] {
        if len != m.n_rows {
            return Err(Error::DimensionMismatch {
                expected: m.n_rows,
                actual: len,
                context,
            });
        }
    }
    if let Some((i, w)) = q.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
        return Err(Error::invalid(format!("weight {i} is {w}, expected >= 0")));
    }
    let d = m.n_cols;
    Ok(exec::chunked_reduce(
        m.n_rows,
        || vec![0.0; d],
        |acc, i| {
            let s = q[i] * v[i];
            if s != 0.0 {
                m.row(i).axpy_into(s, acc);
            }
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    ))
}

/// Lower weighted median: the smallest value `t` such that the weight of
/// `{values <= t}` reaches half the total.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64> {
    median_split(values, weights, false)
}

/// Split threshold with exactly as much mass at or below it as the lower
/// weighted median. When the cumulative weight reaches exactly half at the
/// median, the threshold moves to the middle of the gap before the next value.
pub fn balanced_threshold(values: &[f64], weights: &[f64]) -> Result<f64> {
    median_split(values, weights, true)
}

fn median_split(values: &[f64], weights: &[f64], mid_gap: bool) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("weighted median of an empty set"));
    }
    if values.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: values.len(),
            actual: weights.len(),
            context: "median weights",
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("median weights must be finite and >= 0"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("median of NaN values"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("median weights sum to zero"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut acc = 0.0;
    let mut k = 0;
    while k < order.len() {
        // all copies of a value enter the cumulative weight together
        let t = values[order[k]];
        while k < order.len() && values[order[k]] == t {
            acc += weights[order[k]];
            k += 1;
        }
        if 2.0 * acc >= total {
            if mid_gap && 2.0 * acc == total && k < order.len() {
                let mid = t + 0.5 * (values[order[k]] - t);
                if mid < values[order[k]] {
                    return Ok(mid);
                }
            }
            return Ok(t);
        }
    }
    Ok(values[order[order.len() - 1]])
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
