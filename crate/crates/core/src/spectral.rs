//! Per-node router learning.
//!
//! A node sees examples `x_i` with label sets `y_i` and importance weights
//! `q_i`. The router direction is the top eigenvector of
//!
//! ```text
//! Xᵀ Q X̂,   X̂ = Ŷ X,   Ŷ = Y (Yᵀ Q Y)⁺ Yᵀ Q
//! ```
//!
//! restricted to unit vectors orthogonal to `μ = Xᵀ q`. Because `Ŷ` is a
//! (Q-weighted) projection, `X̂ᵀ Q X̂ = Xᵀ Q X̂`, so each power step needs a
//! single hat application. For one-hot labels that is a per-class weighted
//! average; for multilabel data it is a weighted least-squares fit of `u` on
//! the label columns, solved with a few steps of diagonally preconditioned CG.
//!
//! The bias splits the projections at the lower weighted median, so half of
//! the node's mass goes each way. When the median mass is reached exactly,
//! the bias sits in the middle of the gap to the next projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TaskMode;
use crate::exec;
use crate::sparse::{balanced_threshold, dot, norm, CsrMatrix, SparseRow};
use crate::{Error, Result};

/// Lower bound on the routing noise scale.
pub const SIGMA_FLOOR: f64 = 1e-12;

const INIT_DRAWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub max_power_iters: usize,
    /// Relative Rayleigh-quotient change that counts as converged.
    pub power_tol: f64,
    pub cg_max_iters: usize,
    /// Relative residual at which CG stops.
    pub cg_tol: f64,
    pub seed: u64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            max_power_iters: 200,
            power_tol: 1e-6,
            cg_max_iters: 10,
            cg_tol: 1e-4,
            seed: 0,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_power_iters == 0 || self.cg_max_iters == 0 {
            return Err(Error::invalid("solver iteration caps must be >= 1"));
        }
        if !(self.power_tol > 0.0) || !(self.cg_tol > 0.0) {
            return Err(Error::invalid("solver tolerances must be > 0"));
        }
        Ok(())
    }
}

/// One node's routing hyperplane: go right iff `w·x > b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSolution {
    pub w: Vec<f64>,
    pub b: f64,
    /// Rayleigh quotient of `w` under the weighted operator.
    pub lambda: f64,
    /// Total importance weight at the node.
    pub m: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl RouterSolution {
    #[inline]
    pub fn margin(&self, x: SparseRow<'_>) -> f64 {
        x.dot(&self.w) - self.b
    }

    #[inline]
    pub fn goes_right(&self, x: SparseRow<'_>) -> bool {
        x.dot(&self.w) > self.b
    }
}

/// Label rows re-indexed to the labels that actually occur.
struct LabelSystem {
    offsets: Vec<usize>,
    ids: Vec<u32>,
    n_labels: usize,
}

impl LabelSystem {
    fn new<'a>(rows: impl Iterator<Item = &'a [u32]>, n_classes: usize) -> Self {
        let mut local = vec![u32::MAX; n_classes];
        let mut n_labels = 0u32;
        let mut offsets = vec![0];
        let mut ids = Vec::new();
        for row in rows {
            for &c in row {
                let slot = &mut local[c as usize];
                if *slot == u32::MAX {
                    *slot = n_labels;
                    n_labels += 1;
                }
                ids.push(*slot);
            }
            offsets.push(ids.len());
        }
        LabelSystem {
            offsets,
            ids,
            n_labels: n_labels as usize,
        }
    }

    #[inline]
    fn row(&self, i: usize) -> &[u32] {
        &self.ids[self.offsets[i]..self.offsets[i + 1]]
    }

    fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Per-row class average of `u`, weighted by `q`. Rows must be one-hot.
    fn hat_one_hot(&self, q: &[f64], u: &[f64]) -> Vec<f64> {
        let mut sum = vec![0.0; self.n_labels];
        let mut mass = vec![0.0; self.n_labels];
        for i in 0..self.n_rows() {
            let c = self.row(i)[0] as usize;
            sum[c] += q[i] * u[i];
            mass[c] += q[i];
        }
        (0..self.n_rows())
            .map(|i| {
                let c = self.row(i)[0] as usize;
                if mass[c] > 0.0 {
                    sum[c] / mass[c]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// `Y v`.
    fn expand(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| self.row(i).iter().map(|&c| v[c as usize]).sum())
            .collect()
    }

    /// `Yᵀ diag(q) u`.
    fn gather(&self, q: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_labels];
        for i in 0..self.n_rows() {
            let s = q[i] * u[i];
            if s != 0.0 {
                for &c in self.row(i) {
                    out[c as usize] += s;
                }
            }
        }
        out
    }

    /// `Y v*` where `v*` solves `(YᵀQY) v = YᵀQ u` by Jacobi-preconditioned CG.
    /// Labels with zero weighted count are left out of the system.
    fn hat_least_squares(&self, q: &[f64], u: &[f64], max_iters: usize, tol: f64) -> Vec<f64> {
        let diag = self.gather(q, &vec![1.0; self.n_rows()]);
        let active: Vec<bool> = diag.iter().map(|&d| d > 0.0).collect();
        let mut rhs = self.gather(q, u);
        for (r, &a) in rhs.iter_mut().zip(&active) {
            if !a {
                *r = 0.0;
            }
        }
        let normal = |p: &[f64]| {
            let mut out = self.gather(q, &self.expand(p));
            for (o, &a) in out.iter_mut().zip(&active) {
                if !a {
                    *o = 0.0;
                }
            }
            out
        };
        let precondition = |r: &[f64]| -> Vec<f64> {
            r.iter()
                .zip(&diag)
                .map(|(&r, &d)| if d > 0.0 { r / d } else { 0.0 })
                .collect()
        };

        let mut v = vec![0.0; self.n_labels];
        let rhs_norm = norm(&rhs);
        if rhs_norm == 0.0 {
            return vec![0.0; self.n_rows()];
        }
        let mut r = rhs;
        let mut z = precondition(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..max_iters {
            let ap = normal(&p);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for k in 0..v.len() {
                v[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            if norm(&r) <= tol * rhs_norm {
                break;
            }
            z = precondition(&r);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..p.len() {
                p[k] = z[k] + beta * p[k];
            }
        }
        self.expand(&v)
    }
}

fn check_lengths(y: &CsrMatrix, q: &[f64], u: &[f64]) -> Result<()> {
    for (len, context) in [(q.len(), "hat weights"), (u.len(), "hat input")] {
        if len != y.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: y.n_rows(),
                actual: len,
                context,
            });
        }
    }
    if q.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("hat weights must be >= 0"));
    }
    Ok(())
}

/// `Ŷ u` for one-hot labels: each entry becomes the q-weighted mean of `u`
/// over the examples sharing its class (0 for classes with no weight). O(n).
pub fn hat_apply_multiclass(y: &CsrMatrix, q: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_lengths(y, q, u)?;
    if let Some(i) = (0..y.n_rows()).find(|&i| y.row(i).nnz() != 1) {
        return Err(Error::invalid(format!(
            "label row {i} is not one-hot ({} labels)",
            y.row(i).nnz()
        )));
    }
    let sys = LabelSystem::new(y.rows().map(|r| r.indices), y.n_cols());
    Ok(sys.hat_one_hot(q, u))
}

/// `Ŷ u` for arbitrary binary labels via preconditioned CG on the weighted
/// normal equations.
pub fn hat_apply_multilabel(
    y: &CsrMatrix,
    q: &[f64],
    u: &[f64],
    params: &SolverParams,
) -> Result<Vec<f64>> {
    check_lengths(y, q, u)?;
    let sys = LabelSystem::new(y.rows().map(|r| r.indices), y.n_cols());
    Ok(sys.hat_least_squares(q, u, params.cg_max_iters, params.cg_tol))
}

/// The examples reaching one node, with their fractional weights.
pub(crate) struct NodeProblem<'a> {
    x: &'a CsrMatrix,
    rows: &'a [u32],
    q: &'a [f64],
    labels: LabelSystem,
    mode: TaskMode,
}

impl<'a> NodeProblem<'a> {
    pub(crate) fn new(
        x: &'a CsrMatrix,
        y: &CsrMatrix,
        mode: TaskMode,
        rows: &'a [u32],
        q: &'a [f64],
    ) -> Self {
        let labels = LabelSystem::new(rows.iter().map(|&r| y.row(r as usize).indices), y.n_cols());
        NodeProblem {
            x,
            rows,
            q,
            labels,
            mode,
        }
    }

    #[inline]
    fn xi(&self, i: usize) -> SparseRow<'a> {
        self.x.row(self.rows[i] as usize)
    }

    fn project_all(&self, v: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.rows.len()];
        exec::fill(&mut z, 1024, |i| self.xi(i).dot(v));
        z
    }

    /// `Σ_i s_i x_i`.
    fn combine(&self, s: &[f64]) -> Vec<f64> {
        let d = self.x.n_cols();
        exec::chunked_reduce(
            self.rows.len(),
            || vec![0.0; d],
            |acc, i| {
                if s[i] != 0.0 {
                    self.xi(i).axpy_into(s[i], acc);
                }
            },
            |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
        )
    }

    fn hat(&self, u: &[f64], params: &SolverParams) -> Vec<f64> {
        match self.mode {
            TaskMode::Multiclass => self.labels.hat_one_hot(self.q, u),
            TaskMode::Multilabel => {
                self.labels
                    .hat_least_squares(self.q, u, params.cg_max_iters, params.cg_tol)
            }
        }
    }

    /// `Xᵀ Q Ŷ X v`.
    fn apply(&self, v: &[f64], params: &SolverParams) -> Vec<f64> {
        let z = self.project_all(v);
        let h = self.hat(&z, params);
        let s: Vec<f64> = h.iter().zip(self.q).map(|(h, q)| h * q).collect();
        self.combine(&s)
    }

    fn check(&self) -> Result<f64> {
        let m: f64 = self.q.iter().sum();
        if !(m > 0.0) {
            return Err(Error::invalid("node has no weight"));
        }
        let mut first = None;
        let distinct = (0..self.rows.len()).any(|i| {
            if self.q[i] <= 0.0 {
                return false;
            }
            self.labels.row(i).iter().any(|&c| match first {
                None => {
                    first = Some(c);
                    false
                }
                Some(f) => f != c,
            })
        });
        if !distinct {
            return Err(Error::invalid(
                "node needs at least two distinct labels with positive weight",
            ));
        }
        Ok(m)
    }

    pub(crate) fn solve(&self, params: &SolverParams) -> Result<RouterSolution> {
        params.validate()?;
        let m = self.check()?;
        let d = self.x.n_cols();
        let mu = self.combine(self.q);
        let mu_sq = dot(&mu, &mu);
        let project = |v: &mut [f64]| {
            if mu_sq > 0.0 {
                let c = dot(v, &mu) / mu_sq;
                v.iter_mut().zip(&mu).for_each(|(v, m)| *v -= c * m);
            }
        };
        let scale = (0..self.rows.len())
            .map(|i| self.xi(i).norm_squared())
            .fold(0.0f64, f64::max)
            .sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut v = None;
        for _ in 0..INIT_DRAWS {
            let mut cand: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            project(&mut cand);
            let n = norm(&cand);
            if !(n >= 1e-12) {
                continue;
            }
            cand.iter_mut().for_each(|c| *c /= n);
            // the projected direction must still see some of the data
            let z = self.project_all(&cand);
            if z.iter().fold(0.0f64, |a, b| a.max(b.abs())) > 1e-10 * scale {
                v = Some(cand);
                break;
            }
        }
        let mut v = v.ok_or_else(|| {
            Error::Degenerate("features have no variation orthogonal to the weighted mean".into())
        })?;

        let mut lambda = 0.0;
        let mut prev: Option<f64> = None;
        let mut iterations = 0;
        let mut converged = false;
        for it in 1..=params.max_power_iters {
            iterations = it;
            let mut g = self.apply(&v, params);
            lambda = dot(&v, &g);
            if let Some(p) = prev {
                if (lambda - p).abs() < params.power_tol * lambda.abs() {
                    converged = true;
                    break;
                }
            }
            if it == params.max_power_iters {
                break;
            }
            project(&mut g);
            let n = norm(&g);
            if !(n > 0.0) || !n.is_finite() {
                // operator vanishes on the constrained subspace
                lambda = lambda.max(0.0);
                converged = n == 0.0;
                break;
            }
            g.iter_mut().for_each(|x| *x /= n);
            v = g;
            prev = Some(lambda);
        }

        let z = self.project_all(&v);
        let b = balanced_threshold(&z, self.q)?;
        Ok(RouterSolution {
            w: v,
            b,
            lambda: lambda.max(0.0),
            m,
            iterations,
            converged,
        })
    }
}

/// Learns the router for the examples with `q_i > 0`.
pub fn solve_node(
    x: &CsrMatrix,
    y: &CsrMatrix,
    q: &[f64],
    mode: TaskMode,
    params: &SolverParams,
) -> Result<RouterSolution> {
    if y.n_rows() != x.n_rows() || q.len() != x.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            actual: if y.n_rows() != x.n_rows() {
                y.n_rows()
            } else {
                q.len()
            },
            context: "solve_node rows",
        });
    }
    if q.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("node weights must be finite and >= 0"));
    }
    if mode == TaskMode::Multiclass {
        if let Some(i) = (0..y.n_rows()).find(|&i| q[i] > 0.0 && y.row(i).nnz() != 1) {
            return Err(Error::invalid(format!("label row {i} is not one-hot")));
        }
    }
    let rows: Vec<u32> = (0..x.n_rows() as u32).filter(|&i| q[i as usize] > 0.0).collect();
    let weights: Vec<f64> = rows.iter().map(|&i| q[i as usize]).collect();
    NodeProblem::new(x, y, mode, &rows, &weights).solve(params)
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `Φ((w·x − b)/σ)`: the chance that `x` plus isotropic Gaussian noise of
/// scale `σ` lands on the right side (`w·x > b`). The left side gets the
/// complement.
pub fn routing_probability(r: &RouterSolution, x: SparseRow<'_>, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    std_normal_cdf(r.margin(x) / sigma)
}

/// Routing noise scale `λ / m`, floored at [`SIGMA_FLOOR`].
pub fn node_sigma(r: &RouterSolution) -> Result<f64> {
    if !(r.m > 0.0) {
        return Err(Error::invalid("node_sigma needs positive node mass"));
    }
    let s = r.lambda / r.m;
    Ok(if s >= SIGMA_FLOOR { s } else { SIGMA_FLOOR })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::label_matrix;
    use nalgebra::{DMatrix, DVector, SymmetricEigen};
    use rand::Rng;

    fn one_hot(classes: &[u32], c: usize) -> CsrMatrix {
        let rows: Vec<Vec<u32>> = classes.iter().map(|&k| vec![k]).collect();
        label_matrix(&rows, c).unwrap()
    }

    fn dense(m: &CsrMatrix) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.n_rows(), m.n_cols(), &m.to_dense())
    }

    /// `Y (YᵀQY)⁺ YᵀQ` formed explicitly.
    fn dense_hat(y: &CsrMatrix, q: &[f64]) -> DMatrix<f64> {
        let yd = dense(y);
        let qd = DMatrix::from_diagonal(&DVector::from_column_slice(q));
        let gram = yd.transpose() * &qd * &yd;
        let pinv = gram.pseudo_inverse(1e-12).unwrap();
        &yd * pinv * yd.transpose() * qd
    }

    fn tight() -> SolverParams {
        SolverParams {
            max_power_iters: 50_000,
            power_tol: 1e-15,
            cg_max_iters: 500,
            cg_tol: 1e-14,
            seed: 5,
        }
    }

    #[test]
    fn identity_labels_leave_u_unchanged() {
        let y = one_hot(&[0, 1, 2, 3], 4);
        let u = [0.5, -1.0, 2.0, 3.5];
        assert_eq!(hat_apply_multiclass(&y, &[1.0; 4], &u).unwrap(), u.to_vec());
    }

    #[test]
    fn single_class_projects_onto_constant() {
        let y = one_hot(&[0, 0, 0], 1);
        let out = hat_apply_multiclass(&y, &[1.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn multiclass_hat_rejects_multilabel_rows() {
        let y = label_matrix(&[vec![0, 1], vec![1]], 2).unwrap();
        assert!(hat_apply_multiclass(&y, &[1.0; 2], &[1.0; 2]).is_err());
        assert!(hat_apply_multiclass(&one_hot(&[0], 1), &[1.0; 2], &[1.0]).is_err());
    }

    #[test]
    fn zero_weight_class_maps_to_zero() {
        let y = one_hot(&[0, 1, 1], 2);
        let out = hat_apply_multiclass(&y, &[0.0, 1.0, 3.0], &[9.0, 1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 1.75, 1.75]);
    }

    #[test]
    fn multiclass_hat_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let classes: Vec<u32> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let y = one_hot(&classes, 4);
            let q: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..2.0)).collect();
            let u: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expected = dense_hat(&y, &q) * DVector::from_column_slice(&u);
            let got = hat_apply_multiclass(&y, &q, &u).unwrap();
            for i in 0..20 {
                assert!((got[i] - expected[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn multilabel_hat_matches_dense_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let labels: Vec<Vec<u32>> = (0..30)
                .map(|_| {
                    let mut ls: Vec<u32> = (0..6).filter(|_| rng.random::<f64>() < 0.33).collect();
                    if ls.is_empty() {
                        ls.push(rng.random_range(0..6));
                    }
                    ls
                })
                .collect();
            let y = label_matrix(&labels, 6).unwrap();
            let q: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..2.0)).collect();
            let u: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expected = dense_hat(&y, &q) * DVector::from_column_slice(&u);
            let got = hat_apply_multilabel(&y, &q, &u, &tight()).unwrap();
            for i in 0..30 {
                assert!((got[i] - expected[i]).abs() < 1e-6, "{} vs {}", got[i], expected[i]);
            }
        }
    }

    #[test]
    fn multilabel_hat_on_one_hot_agrees_with_fast_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let classes: Vec<u32> = (0..25).map(|_| rng.random_range(0..5)).collect();
        let y = one_hot(&classes, 5);
        let q: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..2.0)).collect();
        let u: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fast = hat_apply_multiclass(&y, &q, &u).unwrap();
        let cg = hat_apply_multilabel(&y, &q, &u, &SolverParams::default()).unwrap();
        for (a, b) in fast.iter().zip(&cg) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn column_space_is_a_fixed_point() {
        let labels = vec![vec![0], vec![0, 1], vec![1], vec![1, 2], vec![2], vec![0, 2]];
        let y = label_matrix(&labels, 3).unwrap();
        let v = [1.5, -0.5, 2.0];
        let u: Vec<f64> = labels
            .iter()
            .map(|ls| ls.iter().map(|&c| v[c as usize]).sum())
            .collect();
        let params = SolverParams {
            cg_tol: 1e-10,
            cg_max_iters: 50,
            ..Default::default()
        };
        let out = hat_apply_multilabel(&y, &[1.0; 6], &u, &params).unwrap();
        for (a, b) in out.iter().zip(&u) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// Classes at (±1, offset) with isotropic noise, alternating.
    fn two_cluster_problem(noise: f64, offset: f64, seed: u64) -> (CsrMatrix, CsrMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        for i in 0..40 {
            let c = (i % 2) as u32;
            let cx = if c == 0 { 1.0 } else { -1.0 };
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![(0u32, cx + noise * n1), (1u32, offset + noise * n2)]);
            classes.push(c);
        }
        (CsrMatrix::from_rows(2, rows).unwrap(), one_hot(&classes, 2))
    }

    fn projected_dense_top(x: &CsrMatrix, y: &CsrMatrix, q: &[f64]) -> (f64, DVector<f64>) {
        let xd = dense(x);
        let qd = DMatrix::from_diagonal(&DVector::from_column_slice(q));
        let a = xd.transpose() * &qd * dense_hat(y, q) * &xd;
        let mu = xd.transpose() * DVector::from_column_slice(q);
        let d = x.n_cols();
        let p = if mu.norm_squared() > 0.0 {
            DMatrix::identity(d, d) - &mu * mu.transpose() / mu.norm_squared()
        } else {
            DMatrix::identity(d, d)
        };
        let eig = SymmetricEigen::new(&p * a * &p);
        let top = eig.eigenvalues.imax();
        (eig.eigenvalues[top], eig.eigenvectors.column(top).into_owned())
    }

    #[test]
    fn noiseless_clusters_split_on_first_axis() {
        let (x, y) = two_cluster_problem(0.0, 0.0, 1);
        let r = solve_node(&x, &y, &[1.0; 40], TaskMode::Multiclass, &tight()).unwrap();
        assert!((r.w[0].abs() - 1.0).abs() < 1e-6, "{:?}", r.w);
        // the halves meet exactly, so b lands mid-gap
        assert!(r.b.abs() < 1e-9, "b = {}", r.b);
        for i in 0..40 {
            let class = y.row(i).indices[0];
            assert_eq!(r.goes_right(x.row(i)), (class == 0) == (r.w[0] > 0.0));
        }
        let (lambda, _) = projected_dense_top(&x, &y, &[1.0; 40]);
        assert!((r.lambda - lambda).abs() <= 1e-9 * lambda);
    }

    #[test]
    fn noisy_offset_clusters_match_dense_oracle() {
        let (x, y) = two_cluster_problem(1e-3, 3.0, 1);
        let q = vec![1.0; 40];
        let r = solve_node(&x, &y, &q, TaskMode::Multiclass, &tight()).unwrap();
        assert!((r.w[0].abs() - 1.0).abs() < 1e-4, "{:?}", r.w);
        let (lambda, v) = projected_dense_top(&x, &y, &q);
        let cos = v.dot(&DVector::from_column_slice(&r.w));
        assert!(cos.abs() >= 1.0 - 1e-6);
        assert!((r.lambda - lambda).abs() <= 1e-6 * lambda);
    }

    #[test]
    fn balance_and_orthogonality_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..10 {
            let n = 50;
            let x = CsrMatrix::from_dense(
                n,
                6,
                &(0..n * 6).map(|_| rng.random_range(-1.0..2.0)).collect::<Vec<_>>(),
            )
            .unwrap();
            let classes: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let y = one_hot(&classes, 4);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let params = SolverParams {
                seed: trial,
                ..Default::default()
            };
            let r = solve_node(&x, &y, &q, TaskMode::Multiclass, &params).unwrap();
            assert!((norm(&r.w) - 1.0).abs() < 1e-9);
            let mu = crate::sparse::spmv_t_weighted(&x, &q, &vec![1.0; n]).unwrap();
            assert!(dot(&r.w, &mu).abs() <= 1e-6 * norm(&mu));
            let total: f64 = q.iter().sum();
            let left: f64 = (0..n).filter(|&i| !r.goes_right(x.row(i))).map(|i| q[i]).sum();
            let wmax = q.iter().cloned().fold(0.0, f64::max);
            assert!(2.0 * left >= total);
            assert!(left - 0.5 * total <= wmax);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let (x, y) = two_cluster_problem(0.5, 2.0, 3);
        let q = vec![1.0; 40];
        let a = solve_node(&x, &y, &q, TaskMode::Multiclass, &SolverParams::default()).unwrap();
        let b = exec::sequential(|| {
            solve_node(&x, &y, &q, TaskMode::Multiclass, &SolverParams::default())
        })
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn precondition_errors() {
        let (x, y) = two_cluster_problem(0.5, 2.0, 3);
        let p = SolverParams::default();
        assert!(solve_node(&x, &y, &[0.0; 40], TaskMode::Multiclass, &p).is_err());
        let same = one_hot(&[0; 40], 2);
        assert!(solve_node(&x, &same, &[1.0; 40], TaskMode::Multiclass, &p).is_err());
        assert!(solve_node(&x, &y, &[1.0; 3], TaskMode::Multiclass, &p).is_err());
    }

    #[test]
    fn rank_one_features_are_degenerate() {
        // every row is a multiple of (1, 2)
        let rows: Vec<Vec<(u32, f64)>> = (1..=10)
            .map(|k| vec![(0, k as f64), (1, 2.0 * k as f64)])
            .collect();
        let x = CsrMatrix::from_rows(2, rows).unwrap();
        let y = one_hot(&(0..10).map(|i| (i % 2) as u32).collect::<Vec<_>>(), 2);
        let err = solve_node(&x, &y, &[1.0; 10], TaskMode::Multiclass, &SolverParams::default());
        assert!(matches!(err, Err(Error::Degenerate(_))), "{err:?}");
    }

    #[test]
    fn rescaling_features_scales_lambda_quadratically() {
        let (x, y) = two_cluster_problem(0.7, 2.0, 9);
        let q = vec![1.0; 40];
        let r1 = solve_node(&x, &y, &q, TaskMode::Multiclass, &tight()).unwrap();
        let x3 = x.map_values(|v| 3.0 * v).unwrap();
        let r3 = solve_node(&x3, &y, &q, TaskMode::Multiclass, &tight()).unwrap();
        assert!((r3.lambda / r1.lambda - 9.0).abs() < 1e-6 * 9.0);
        assert!(dot(&r1.w, &r3.w).abs() >= 1.0 - 1e-6);
    }

    #[test]
    fn routing_probability_values() {
        let r = RouterSolution {
            w: vec![1.0, 0.0],
            b: 0.5,
            lambda: 1.0,
            m: 1.0,
            iterations: 1,
            converged: true,
        };
        let at = crate::sparse::SparseVec::from_pairs([(0, 0.5)]).unwrap();
        assert_eq!(routing_probability(&r, at.as_row(), 0.3), 0.5);
        let one_sigma = crate::sparse::SparseVec::from_pairs([(0, 0.8)]).unwrap();
        let p = routing_probability(&r, one_sigma.as_row(), 0.3);
        assert!((p - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(p + (1.0 - p), 1.0);
    }

    #[test]
    fn normal_cdf_matches_reference_table() {
        // Φ(z) from a 40-digit arbitrary-precision evaluation
        let table = [
            (-8.0, 6.220_960_574_271_784_1e-16),
            (-5.0, 2.866_515_718_791_939_1e-7),
            (-2.5, 6.209_665_325_776_135_2e-3),
            (-1.0, 0.158_655_253_931_457_05),
            (-0.3, 0.382_088_577_811_047_37),
            (0.0, 0.5),
            (0.1, 0.539_827_837_277_028_98),
            (1.0, 0.841_344_746_068_542_95),
            (1.96, 0.975_002_104_851_779_56),
            (3.3, 0.999_516_575_857_616_22),
            (6.0, 0.999_999_999_013_412_35),
        ];
        for (z, phi) in table {
            let got = std_normal_cdf(z);
            assert!((got - phi).abs() <= 1e-12 * phi, "z={z}: {got} vs {phi}");
        }
    }

    #[test]
    fn sigma_rules() {
        let mut r = RouterSolution {
            w: vec![1.0],
            b: 0.0,
            lambda: 2.0,
            m: 4.0,
            iterations: 1,
            converged: true,
        };
        assert_eq!(node_sigma(&r).unwrap(), 0.5);
        r.lambda = 0.0;
        assert_eq!(node_sigma(&r).unwrap(), SIGMA_FLOOR);
        r.m = 0.0;
        assert!(node_sigma(&r).is_err());
    }

    #[test]
    fn duplicating_examples_leaves_sigma_unchanged() {
        // λ is the raw weighted Rayleigh quotient, so it doubles along with m
        let (x, y) = two_cluster_problem(0.6, 2.0, 12);
        let q = vec![1.0; 40];
        let r1 = solve_node(&x, &y, &q, TaskMode::Multiclass, &tight()).unwrap();
        let idx: Vec<usize> = (0..40).chain(0..40).collect();
        let x2 = x.select_rows(&idx);
        let y2 = y.select_rows(&idx);
        let r2 = solve_node(&x2, &y2, &[1.0; 80], TaskMode::Multiclass, &tight()).unwrap();
        assert!((r2.lambda / r1.lambda - 2.0).abs() < 1e-6);
        assert_eq!(r2.m, 2.0 * r1.m);
        let (s1, s2) = (node_sigma(&r1).unwrap(), node_sigma(&r2).unwrap());
        assert!((s1 / s2 - 1.0).abs() < 1e-6, "{s1} {s2}");
    }
}
