//! Dense 4-way tensors and the three slice unfoldings used by the decompositions.
//!
//! A data tensor is indexed `(i, j, k, l)` = (acquisition, mass channel,
//! modulation, sample). Storage is row-major over that order, so the linear
//! offset of `(i, j, k, l)` is `((i * J + j) * K + k) * L + l`.
//!
//! Unfoldings:
//!
//! * [`UnfoldMode::Kl`]: one `I x J` slice per (modulation, sample), ordered
//!   sample-major (every modulation of sample 0, then sample 1, ...).
//! * [`UnfoldMode::Il`]: one `K x J` slice per (acquisition, sample), ordered
//!   sample-major the same way.
//! * [`UnfoldMode::L`]: one `(I*K) x J` slice per sample. Row `i * K + k`
//!   holds `(i, k)`, which is the row order of [`khatri_rao`]`(F2, F1)` for an
//!   `I x R` profile matrix `F2` and a `K x R` profile matrix `F1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl DenseTensor4 {
    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(shape)?;
        if data.len() != len {
            return Err(Error::dim(format!(
                "tensor of shape {shape:?} needs {len} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn acquisitions(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn modulations(&self) -> usize {
        self.shape[2]
    }

    pub fn samples(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let [_, nj, nk, nl] = self.shape;
        ((i * nj + j) * nk + k) * nl + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.offset(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, value: f64) {
        let o = self.offset(i, j, k, l);
        self.data[o] = value;
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn checked_len(shape: [usize; 4]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::dim(format!("all tensor dims must be >= 1, got {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim(format!("tensor shape {shape:?} overflows usize")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnfoldMode {
    /// `I x J` slices, one per (modulation, sample).
    Kl,
    /// `K x J` slices, one per (acquisition, sample).
    Il,
    /// `(I*K) x J` slices, one per sample.
    L,
}

/// Tensor coordinates a slice was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SliceKey {
    Modulation { k: usize, sample: usize },
    Acquisition { i: usize, sample: usize },
    Sample(usize),
}

impl SliceKey {
    pub fn sample(&self) -> usize {
        match *self {
            SliceKey::Modulation { sample, .. } | SliceKey::Acquisition { sample, .. } => sample,
            SliceKey::Sample(l) => l,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SliceSet {
    mode: UnfoldMode,
    shape: [usize; 4],
    slices: Vec<Matrix>,
    keys: Vec<SliceKey>,
}

impl SliceSet {
    /// Builds a slice set, checking counts and per-slice shapes against `shape`.
    pub fn new(mode: UnfoldMode, shape: [usize; 4], slices: Vec<Matrix>) -> Result<Self> {
        checked_len(shape)?;
        let keys = slice_keys(mode, shape);
        if slices.len() != keys.len() {
            return Err(Error::dim(format!(
                "{mode:?} unfolding of {shape:?} has {} slices, got {}",
                keys.len(),
                slices.len()
            )));
        }
        let (rows, cols) = slice_shape(mode, shape);
        if let Some((h, m)) = slices
            .iter()
            .enumerate()
            .find(|(_, m)| m.shape() != (rows, cols))
        {
            return Err(Error::dim(format!(
                "slice {h} has shape {:?}, expected ({rows}, {cols})",
                m.shape()
            )));
        }
        Ok(Self {
            mode,
            shape,
            slices,
            keys,
        })
    }

    pub fn mode(&self) -> UnfoldMode {
        self.mode
    }

    /// Shape of the tensor this set unfolds.
    pub fn tensor_shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slices(&self) -> &[Matrix] {
        &self.slices
    }

    pub fn slice(&self, h: usize) -> &Matrix {
        &self.slices[h]
    }

    pub fn keys(&self) -> &[SliceKey] {
        &self.keys
    }

    pub fn key(&self, h: usize) -> SliceKey {
        self.keys[h]
    }

    /// Position of the slice cut at `key`.
    pub fn index_of(&self, key: SliceKey) -> Option<usize> {
        let [ni, _, nk, nl] = self.shape;
        match (self.mode, key) {
            (UnfoldMode::Kl, SliceKey::Modulation { k, sample }) if k < nk && sample < nl => {
                Some(sample * nk + k)
            }
            (UnfoldMode::Il, SliceKey::Acquisition { i, sample }) if i < ni && sample < nl => {
                Some(sample * ni + i)
            }
            (UnfoldMode::L, SliceKey::Sample(l)) if l < nl => Some(l),
            _ => None,
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.slices.iter().map(|m| m.norm_squared()).sum()
    }
}

fn slice_keys(mode: UnfoldMode, shape: [usize; 4]) -> Vec<SliceKey> {
    let [ni, _, nk, nl] = shape;
    match mode {
        UnfoldMode::Kl => (0..nl)
            .flat_map(|sample| (0..nk).map(move |k| SliceKey::Modulation { k, sample }))
            .collect(),
        UnfoldMode::Il => (0..nl)
            .flat_map(|sample| (0..ni).map(move |i| SliceKey::Acquisition { i, sample }))
            .collect(),
        UnfoldMode::L => (0..nl).map(SliceKey::Sample).collect(),
    }
}

fn slice_shape(mode: UnfoldMode, shape: [usize; 4]) -> (usize, usize) {
    let [ni, nj, nk, _] = shape;
    match mode {
        UnfoldMode::Kl => (ni, nj),
        UnfoldMode::Il => (nk, nj),
        UnfoldMode::L => (ni * nk, nj),
    }
}

/// Row of a mode-L slice holding acquisition `i` at modulation `k`.
#[inline]
pub fn l_row(i: usize, k: usize, modulations: usize) -> usize {
    i * modulations + k
}

pub fn unfold(x: &DenseTensor4, mode: UnfoldMode) -> SliceSet {
    let shape = x.shape();
    let [ni, nj, nk, _] = shape;
    let keys = slice_keys(mode, shape);
    let slices = keys
        .iter()
        .map(|key| match *key {
            SliceKey::Modulation { k, sample } => {
                Matrix::from_fn(ni, nj, |i, j| x.get(i, j, k, sample))
            }
            SliceKey::Acquisition { i, sample } => {
                Matrix::from_fn(nk, nj, |k, j| x.get(i, j, k, sample))
            }
            SliceKey::Sample(l) => {
                Matrix::from_fn(ni * nk, nj, |row, j| x.get(row / nk, j, row % nk, l))
            }
        })
        .collect();
    SliceSet {
        mode,
        shape,
        slices,
        keys,
    }
}

pub fn fold(set: &SliceSet, shape: [usize; 4]) -> Result<DenseTensor4> {
    if set.shape != shape {
        return Err(Error::dim(format!(
            "slice set unfolds a {:?} tensor, asked to fold into {shape:?}",
            set.shape
        )));
    }
    let (rows, cols) = slice_shape(set.mode, shape);
    let nk = shape[2];
    let mut x = DenseTensor4::zeros(shape)?;
    for (m, key) in set.slices.iter().zip(&set.keys) {
        match *key {
            SliceKey::Modulation { k, sample } => {
                for j in 0..cols {
                    for i in 0..rows {
                        x.set(i, j, k, sample, m[(i, j)]);
                    }
                }
            }
            SliceKey::Acquisition { i, sample } => {
                for j in 0..cols {
                    for k in 0..rows {
                        x.set(i, j, k, sample, m[(k, j)]);
                    }
                }
            }
            SliceKey::Sample(l) => {
                for j in 0..cols {
                    for row in 0..rows {
                        x.set(row / nk, j, row % nk, l, m[(row, j)]);
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Column-wise Kronecker product. Column `r` of the result is `a[:, r] ⊗ b[:, r]`,
/// so row `p * b.nrows() + q` holds `a[p, r] * b[q, r]`.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::dim(format!(
            "khatri_rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let nb = b.nrows();
    Ok(Matrix::from_fn(a.nrows() * nb, a.ncols(), |row, r| {
        a[(row / nb, r)] * b[(row % nb, r)]
    }))
}

/// Scales every nonzero column to unit Euclidean norm.
///
/// Returns the normalized matrix and the removed scales, so that
/// `m == normalized * diag(scales)`. Zero columns pass through with scale 0.
pub fn column_normalize(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let scales = normalize_columns_in_place(&mut out);
    (out, scales)
}

pub(crate) fn normalize_columns_in_place(m: &mut Matrix) -> Vec<f64> {
    m.column_iter_mut()
        .map(|mut col| {
            let norm = col.norm();
            if norm > 0.0 && norm.is_finite() {
                col /= norm;
                norm
            } else {
                0.0
            }
        })
        .collect()
}
