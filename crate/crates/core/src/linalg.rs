//! Small dense kernels used by the ALS updates: truncated SVD, orthogonal
//! Procrustes projection, ridge-style right division and non-negative least
//! squares in Gram form.

use nalgebra::{DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Systems with a condition estimate above this are reported as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (mut col, &s) in us.column_iter_mut().zip(&self.s) {
            col *= s;
        }
        us * self.v.transpose()
    }
}

pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<TruncatedSvd> {
    let (rows, cols) = m.shape();
    if rank > rows.min(cols) {
        return Err(Error::dim(format!(
            "rank {rank} exceeds min({rows}, {cols}) for truncated SVD"
        )));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let values = svd.singular_values;

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(rank);

    Ok(TruncatedSvd {
        u: Matrix::from_fn(rows, rank, |i, c| u[(i, order[c])]),
        s: order.iter().map(|&c| values[c].max(0.0)).collect(),
        v: Matrix::from_fn(cols, rank, |j, c| v_t[(order[c], j)]),
    })
}

#[derive(Debug, Clone)]
pub struct Projection {
    /// Orthonormal-column `m x R` matrix.
    pub p: Matrix,
    /// The cross-product `B * Bstar^T` was rank deficient.
    pub degenerate: bool,
}

/// Orthonormal `P` minimizing `||b - P * bstar||_F`, via the SVD of `b * bstar^T`.
pub fn procrustes_project(b: &Matrix, bstar: &Matrix) -> Result<Projection> {
    let (m, r) = b.shape();
    if bstar.shape() != (r, r) {
        return Err(Error::dim(format!(
            "latent factor must be {r}x{r}, got {:?}",
            bstar.shape()
        )));
    }
    if m < r {
        return Err(Error::dim(format!(
            "Procrustes projection needs at least {r} rows, got {m}"
        )));
    }
    let cross = b * bstar.transpose();
    let svd = truncated_svd(&cross, r)?;
    let top = svd.s.first().copied().unwrap_or(0.0);
    let degenerate = svd.s.iter().any(|&s| s <= 1e-12 * top) || top == 0.0;
    Ok(Projection {
        p: &svd.u * svd.v.transpose(),
        degenerate,
    })
}

fn symmetric_eigenvalues(m: &Matrix) -> DVector<f64> {
    SymmetricEigen::new(m.clone()).eigenvalues
}

/// Condition estimate of a symmetric matrix; infinite when it is not positive definite.
pub fn spd_condition(m: &Matrix) -> f64 {
    let eig = symmetric_eigenvalues(m);
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `Z * (g + mu * I) = n` for `Z`.
pub fn regularized_rdiv(n: &Matrix, g: &Matrix, mu: f64) -> Result<Matrix> {
    let r = g.nrows();
    if g.ncols() != r || n.ncols() != r {
        return Err(Error::dim(format!(
            "right division needs an RxR system matching {} columns, got {:?}",
            n.ncols(),
            g.shape()
        )));
    }
    if !(mu >= 0.0) {
        return Err(Error::Config(format!("coupling must be >= 0, got {mu}")));
    }
    let mut system = g.clone();
    for d in 0..r {
        system[(d, d)] += mu;
    }
    let condition = spd_condition(&system);
    if condition > MAX_CONDITION {
        return Err(Error::Singular {
            context: "regularized right division".into(),
            condition,
        });
    }
    let chol = system.cholesky().ok_or(Error::Singular {
        context: "regularized right division (Cholesky)".into(),
        condition,
    })?;
    Ok(chol.solve(&n.transpose()).transpose())
}

/// Row-wise non-negative least squares in Gram form.
///
/// Each row `z` of the result minimizes `z^T G z - 2 z^T h` over `z >= 0`,
/// where `h` is the matching row of `h`. This is the normal-equation view of
/// `min ||Y - Z W^T||` with `G = W^T W` and `h = Y W`, solved with the
/// Lawson-Hanson active-set method on the shared Gram matrix.
pub fn nnls_solve(g: &Matrix, h: &Matrix) -> Result<Matrix> {
    let r = g.nrows();
    if g.ncols() != r || h.ncols() != r {
        return Err(Error::dim(format!(
            "NNLS needs an RxR Gram matching {} target columns, got {:?}",
            h.ncols(),
            g.shape()
        )));
    }
    let eig = symmetric_eigenvalues(g);
    let scale = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if eig.min() < -1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: eig.min(),
        });
    }
    let mut out = Matrix::zeros(h.nrows(), r);
    for row in 0..h.nrows() {
        let target = h.row(row).transpose();
        let z = nnls_row(g, &target);
        for c in 0..r {
            out[(row, c)] = z[c];
        }
    }
    Ok(out)
}

fn solve_passive(g: &Matrix, h: &DVector<f64>, passive: &[usize]) -> DVector<f64> {
    let p = passive.len();
    let sub = Matrix::from_fn(p, p, |a, b| g[(passive[a], passive[b])]);
    let rhs = DVector::from_fn(p, |a, _| h[passive[a]]);
    if let Some(chol) = sub.clone().cholesky() {
        return chol.solve(&rhs);
    }
    sub.svd(true, true)
        .solve(&rhs, 1e-14)
        .unwrap_or_else(|_| DVector::zeros(p))
}

fn nnls_row(g: &Matrix, h: &DVector<f64>) -> DVector<f64> {
    let n = h.len();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let gmax = g.amax();
    let hmax = h.amax();
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = h - g * &x;
        let tol = 10.0 * n as f64 * f64::EPSILON * (gmax * x.amax() + hmax);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else { break };
        passive[j] = true;

        for _ in 0..=n {
            let idx: Vec<usize> = (0..n).filter(|&c| passive[c]).collect();
            let s = solve_passive(g, h, &idx);
            if s.iter().all(|&v| v > 0.0) {
                for (a, &c) in idx.iter().enumerate() {
                    x[c] = s[a];
                }
                break;
            }
            // Step toward s until the first passive variable hits zero.
            let mut alpha = f64::INFINITY;
            let mut blocking = idx[0];
            for (a, &c) in idx.iter().enumerate() {
                if s[a] <= 0.0 {
                    let denom = x[c] - s[a];
                    let t = if denom > 0.0 { x[c] / denom } else { 0.0 };
                    if t < alpha {
                        alpha = t;
                        blocking = c;
                    }
                }
            }
            for (a, &c) in idx.iter().enumerate() {
                x[c] += alpha * (s[a] - x[c]);
            }
            x[blocking] = 0.0;
            for &c in &idx {
                if x[c] <= 0.0 {
                    x[c] = 0.0;
                    passive[c] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}
