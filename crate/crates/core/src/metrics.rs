//! Fit-quality metrics: cosine matching of components, percent variance
//! explained, residual sums and abundance regression.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flex::FlexState;
use crate::tensor::{DenseTensor4, Matrix, SliceSet};

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedInput("cosine of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `permutation[r]` is the estimated column matched to truth column `r`.
    pub permutation: Vec<usize>,
    /// Cosine between truth column `r` and its matched estimate.
    pub per_component_cosines: Vec<f64>,
    pub mean_cosine: f64,
}

/// `truth.ncols() x est.ncols()` matrix of column cosines; zero columns give 0.
pub fn cosine_matrix(truth: &Matrix, est: &Matrix) -> Result<Matrix> {
    if truth.nrows() != est.nrows() {
        return Err(Error::dim(format!(
            "cannot compare columns of length {} and {}",
            truth.nrows(),
            est.nrows()
        )));
    }
    Ok(Matrix::from_fn(truth.ncols(), est.ncols(), |a, b| {
        let (t, e) = (truth.column(a), est.column(b));
        let denom = t.norm() * e.norm();
        if denom == 0.0 {
            0.0
        } else {
            t.dot(&e) / denom
        }
    }))
}

/// Assignment maximizing the summed cosine between truth and estimated columns.
pub fn match_components(truth: &Matrix, est: &Matrix) -> Result<MatchResult> {
    if truth.shape() != est.shape() {
        return Err(Error::dim(format!(
            "truth is {:?} but estimate is {:?}",
            truth.shape(),
            est.shape()
        )));
    }
    let cos = cosine_matrix(truth, est)?;
    let r = cos.nrows();
    let permutation = if r <= 8 {
        best_permutation_exhaustive(&cos)
    } else {
        hungarian_max(&cos)
    };
    let per_component_cosines: Vec<f64> = (0..r).map(|a| cos[(a, permutation[a])]).collect();
    let mean_cosine = if r == 0 {
        0.0
    } else {
        per_component_cosines.iter().sum::<f64>() / r as f64
    };
    Ok(MatchResult {
        permutation,
        per_component_cosines,
        mean_cosine,
    })
}

/// Exhaustive search over all permutations; the first maximum in lexicographic order wins.
pub fn best_permutation_exhaustive(score: &Matrix) -> Vec<usize> {
    fn recurse(
        score: &Matrix,
        row: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        total: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        let n = score.nrows();
        if row == n {
            if total > best.0 {
                *best = (total, current.clone());
            }
            return;
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                current.push(c);
                recurse(score, row + 1, used, current, total + score[(row, c)], best);
                current.pop();
                used[c] = false;
            }
        }
    }
    let n = score.nrows();
    let mut best = (f64::NEG_INFINITY, (0..n).collect());
    recurse(score, 0, &mut vec![false; n], &mut Vec::with_capacity(n), 0.0, &mut best);
    best.1
}

/// Hungarian algorithm (potentials form) maximizing the total score of a square matrix.
pub fn hungarian_max(score: &Matrix) -> Vec<usize> {
    let n = score.nrows();
    let cost = |i: usize, j: usize| -score[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Sample `l` of an `[I, R, K, L]` profile tensor as an `(I*K) x R` matrix, row `i*K + k`.
pub fn unfold_profiles(profiles: &DenseTensor4, l: usize) -> Matrix {
    let [ni, nr, nk, _] = profiles.shape();
    Matrix::from_fn(ni * nk, nr, |row, r| profiles.get(row / nk, r, row % nk, l))
}

/// Squared residual between `x` and the per-sample reconstruction
/// `F_l diag(d_l) A^T`, with `profiles` shaped `[I, R, K, L]`.
pub fn reconstruction_ssr(
    x: &DenseTensor4,
    profiles: &DenseTensor4,
    amplitudes: &[DVector<f64>],
    spectra: &Matrix,
) -> Result<f64> {
    residual_and_total(x, profiles, amplitudes, spectra).map(|(ssr, _)| ssr)
}

/// `(SSR, ||X||^2)`, accumulated in the same order so a zero model gives exactly equal sums.
fn residual_and_total(
    x: &DenseTensor4,
    profiles: &DenseTensor4,
    amplitudes: &[DVector<f64>],
    spectra: &Matrix,
) -> Result<(f64, f64)> {
    let [ni, nj, nk, nl] = x.shape();
    let [pi, pr, pk, pl] = profiles.shape();
    if (pi, pk, pl) != (ni, nk, nl)
        || spectra.shape() != (nj, pr)
        || amplitudes.len() != nl
        || amplitudes.iter().any(|d| d.len() != pr)
    {
        return Err(Error::dim(format!(
            "model ({:?} profiles, {:?} spectra, {} amplitude vectors) does not match data {:?}",
            profiles.shape(),
            spectra.shape(),
            amplitudes.len(),
            x.shape()
        )));
    }
    let mut ssr = 0.0;
    let mut total = 0.0;
    for l in 0..nl {
        let mut fd = unfold_profiles(profiles, l);
        for (mut col, s) in fd.column_iter_mut().zip(amplitudes[l].iter()) {
            col *= *s;
        }
        let model = fd * spectra.transpose();
        for i in 0..ni {
            for k in 0..nk {
                let row = i * nk + k;
                for j in 0..nj {
                    let v = x.get(i, j, k, l);
                    let e = v - model[(row, j)];
                    ssr += e * e;
                    total += v * v;
                }
            }
        }
    }
    Ok((ssr, total))
}

/// `100 * (1 - SSR / ||X||^2)`.
pub fn percent_var(
    x: &DenseTensor4,
    profiles: &DenseTensor4,
    amplitudes: &[DVector<f64>],
    spectra: &Matrix,
) -> Result<f64> {
    let (ssr, total) = residual_and_total(x, profiles, amplitudes, spectra)?;
    if total == 0.0 {
        return Err(Error::UndefinedInput("percent variance of a zero tensor".into()));
    }
    Ok(100.0 * (1.0 - ssr / total))
}

/// `sum_h ||X_h - B_h D_h A^T||^2`.
pub fn ssr(slices: &SliceSet, state: &FlexState) -> f64 {
    state.ssr(slices)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least-squares line `y = slope * x + intercept`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<Regression> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::UndefinedInput(format!(
            "regression needs two equal-length series of at least 2 points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::UndefinedInput("regression on a constant predictor".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
