//! Flexible-coupling non-negative PARAFAC2 on one slice set.
//!
//! Each slice `X_h` is modelled as `B_h * diag(d_h) * A^T`, with the per-slice
//! scores `B_h` softly tied to a shared structure through the penalty
//! `mu_h * ||B_h - P_h * Bstar||_F^2`, where `P_h` has orthonormal columns and
//! `Bstar` is an `R x R` latent factor. The full objective is
//!
//! ```text
//! sum_h ||X_h - B_h D_h A^T||_F^2 + mu_h ||B_h - P_h Bstar||_F^2
//!     [+ mu_A ||A - A_partner||_F^2]
//! ```
//!
//! where the bracketed spectral term is only present when the model is
//! coupled to a partner model (see [`crate::coupled`]).
//!
//! A sweep updates, in order: projections `P`, latent `Bstar`, loadings `A`,
//! scores `B`, amplitudes `D`, then the coupling schedule.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, nnls_solve, procrustes_project, regularized_rdiv, truncated_svd};
use crate::tensor::{normalize_columns_in_place, Matrix, SliceSet};

/// Returned by [`estimate_snr`] when the second singular value vanishes.
pub const SNR_CAP: f64 = 1e12;
/// Coupling assigned to a slice whose coupling residual is exactly zero.
pub const COUPLING_CAP: f64 = 1e12;
/// Lower bound on a slice coupling, relative to the slice's squared norm.
pub const COUPLING_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nonnegativity {
    pub scores: bool,
    pub spectra: bool,
    pub amplitudes: bool,
}

impl Default for Nonnegativity {
    fn default() -> Self {
        Self {
            scores: false,
            spectra: false,
            amplitudes: true,
        }
    }
}

impl Nonnegativity {
    pub fn none() -> Self {
        Self {
            scores: false,
            spectra: false,
            amplitudes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlexConfig {
    pub rank: usize,
    pub nonneg: Nonnegativity,
    /// Per-sweep multiplier applied to every slice coupling during the growth window.
    pub mu_growth: f64,
    /// Sweeps `2..=growth_iters` grow the couplings.
    pub growth_iters: usize,
    /// Relative objective change below which a fit is converged.
    pub eps: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FlexConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            nonneg: Nonnegativity::default(),
            mu_growth: 1.05,
            growth_iters: 10,
            eps: 2.5e-6,
            max_iters: 500,
            seed: 0,
        }
    }
}

impl FlexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !(self.mu_growth >= 1.0) || !self.mu_growth.is_finite() {
            return Err(Error::Config(format!("mu_growth must be >= 1, got {}", self.mu_growth)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// True when sweep number `sweep` (1-based) leaves the slice couplings unchanged.
    pub fn coupling_frozen(&self, sweep: usize) -> bool {
        sweep >= 2 && sweep > self.growth_iters
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlexDiagnostics {
    /// Slices whose `B * Bstar^T` was rank deficient in the last projection update.
    pub degenerate_projections: usize,
    /// Slices whose SNR estimate hit [`SNR_CAP`].
    pub capped_snr: Vec<usize>,
    /// Slices whose coupling hit [`COUPLING_CAP`].
    pub capped_coupling: Vec<usize>,
    /// Slices whose coupling was raised to the floor.
    pub floored_coupling: Vec<usize>,
    /// Components with no signal left in any slice at the last loadings update.
    pub dead_components: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FlexState {
    /// `B_h`, one `rows_h x R` matrix per slice.
    pub scores: Vec<Matrix>,
    /// `A`, the `J x R` loadings shared by every slice.
    pub loadings: Matrix,
    /// `Bstar`, the `R x R` latent coupling factor.
    pub latent: Matrix,
    /// `P_h`, orthonormal-column `rows_h x R`.
    pub projections: Vec<Matrix>,
    /// Diagonal of `D_h`.
    pub amplitudes: Vec<DVector<f64>>,
    /// `mu_h`.
    pub coupling: Vec<f64>,
    /// Number of the next sweep (starts at 1).
    pub iter: usize,
    pub nonneg: Nonnegativity,
    pub diagnostics: FlexDiagnostics,
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    // Column-major fill order, so the stream layout is fixed by shape alone.
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
    Matrix::from_vec(rows, cols, values)
}

fn scale_columns(m: &Matrix, d: &DVector<f64>) -> Matrix {
    let mut out = m.clone();
    for (mut col, &s) in out.column_iter_mut().zip(d.iter()) {
        col *= s;
    }
    out
}

fn scale_rows_and_columns(g: &Matrix, d: &DVector<f64>) -> Matrix {
    Matrix::from_fn(g.nrows(), g.ncols(), |a, b| d[a] * g[(a, b)] * d[b])
}

/// `||X - B diag(d) A^T||_F^2`.
pub fn slice_ssr(x: &Matrix, b: &Matrix, d: &DVector<f64>, a: &Matrix) -> f64 {
    let model = scale_columns(b, d) * a.transpose();
    (x - model).norm_squared()
}

/// SNR proxy of a slice: ratio of the two leading singular values after column centring.
pub fn estimate_snr(x: &Matrix) -> Result<f64> {
    if x.nrows() < 2 || x.ncols() < 2 {
        return Err(Error::dim(format!(
            "SNR estimate needs at least a 2x2 slice, got {:?}",
            x.shape()
        )));
    }
    let mut centred = x.clone();
    for mut col in centred.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let s = truncated_svd(&centred, 2)?.s;
    if !(s[1] > 1e-12 * s[0]) {
        return Ok(SNR_CAP);
    }
    Ok((s[0] / s[1]).min(SNR_CAP))
}

impl FlexState {
    /// Random initial state: uniform `[0, 1)` draws for `A`, then `Bstar`, then
    /// every `B_h` in slice order, all from one stream seeded by `cfg.seed`.
    /// Two slice sets with the same channel count and rank therefore start from
    /// the same `A` and `Bstar` under the same seed.
    pub fn init(slices: &SliceSet, cfg: &FlexConfig) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.rank;
        if slices.is_empty() {
            return Err(Error::dim("cannot fit an empty slice set"));
        }
        if let Some(m) = slices.slices().iter().find(|m| m.nrows() < r) {
            return Err(Error::dim(format!(
                "slices need at least {r} rows for rank {r}, found {:?}",
                m.shape()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut loadings = uniform_matrix(slices.channels(), r, &mut rng);
        let mut latent = uniform_matrix(r, r, &mut rng);
        let mut scores: Vec<Matrix> = slices
            .slices()
            .iter()
            .map(|x| uniform_matrix(x.nrows(), r, &mut rng))
            .collect();
        normalize_columns_in_place(&mut loadings);
        normalize_columns_in_place(&mut latent);
        scores.iter_mut().for_each(|b| {
            normalize_columns_in_place(b);
        });

        let amplitudes = vec![DVector::from_element(r, 1.0); slices.len()];
        let coupling = scores
            .iter()
            .zip(&amplitudes)
            .map(|(b, d)| {
                let fit = (scale_columns(b, d) * loadings.transpose()).norm_squared();
                fit / b.norm_squared()
            })
            .collect();

        let mut state = Self {
            projections: Vec::new(),
            scores,
            loadings,
            latent,
            amplitudes,
            coupling,
            iter: 1,
            nonneg: cfg.nonneg,
            diagnostics: FlexDiagnostics::default(),
        };
        state.update_projections()?;
        Ok(state)
    }

    pub fn rank(&self) -> usize {
        self.loadings.ncols()
    }

    /// `P_h` from the Procrustes problem `min ||B_h - P_h Bstar||_F`.
    pub fn update_projections(&mut self) -> Result<()> {
        let results: Vec<_> = self
            .scores
            .par_iter()
            .map(|b| procrustes_project(b, &self.latent))
            .collect();
        let mut degenerate = 0;
        self.projections = results
            .into_iter()
            .map(|res| {
                res.map(|proj| {
                    degenerate += usize::from(proj.degenerate);
                    proj.p
                })
            })
            .collect::<Result<_>>()?;
        self.diagnostics.degenerate_projections = degenerate;
        Ok(())
    }

    /// Unnormalized `sum_h mu_h P_h^T B_h`.
    pub fn latent_sum(&self) -> Matrix {
        let r = self.rank();
        self.projections
            .iter()
            .zip(&self.scores)
            .zip(&self.coupling)
            .fold(Matrix::zeros(r, r), |acc, ((p, b), &mu)| acc + p.tr_mul(b) * mu)
    }

    /// `Bstar` as the column-normalized coupling-weighted sum of `P_h^T B_h`.
    pub fn update_latent(&mut self) {
        let mut latent = self.latent_sum();
        normalize_columns_in_place(&mut latent);
        self.latent = latent;
    }

    /// Loadings solving the stationarity condition of the objective in `A`:
    /// `A = (mu_A A_partner + sum X_h^T B_h D_h) (sum D_h B_h^T B_h D_h + mu_A I)^-1`,
    /// or its non-negative counterpart.
    pub fn solve_loadings(
        &mut self,
        slices: &SliceSet,
        mu_a: f64,
        partner: Option<&Matrix>,
    ) -> Result<Matrix> {
        let r = self.rank();
        let j = slices.channels();
        if !(mu_a >= 0.0) {
            return Err(Error::Config(format!("spectral coupling must be >= 0, got {mu_a}")));
        }
        let partner = match (mu_a > 0.0, partner) {
            (true, None) => {
                return Err(Error::Config("spectral coupling > 0 requires a partner".into()))
            }
            (true, Some(p)) if p.shape() != (j, r) => {
                return Err(Error::dim(format!(
                    "partner loadings must be {j}x{r}, got {:?}",
                    p.shape()
                )))
            }
            (true, Some(p)) => Some(p),
            (false, _) => None,
        };

        let parts: Vec<(Matrix, Matrix)> = slices
            .slices()
            .par_iter()
            .zip(self.scores.par_iter())
            .zip(self.amplitudes.par_iter())
            .map(|((x, b), d)| {
                let bd = scale_columns(b, d);
                (x.tr_mul(&bd), bd.tr_mul(&bd))
            })
            .collect();
        let mut numer = Matrix::zeros(j, r);
        let mut gram = Matrix::zeros(r, r);
        for (n, g) in parts {
            numer += n;
            gram += g;
        }
        if let Some(p) = partner {
            numer += p * mu_a;
        }

        // A component without signal anywhere leaves its column undetermined;
        // keep the previous one so the remaining columns can still be solved.
        let mut dead = Vec::new();
        if mu_a == 0.0 {
            let top = (0..r).map(|c| gram[(c, c)]).fold(0.0, f64::max);
            for c in 0..r {
                if gram[(c, c)] <= 1e-13 * top || top == 0.0 {
                    dead.push(c);
                    for o in 0..r {
                        gram[(c, o)] = 0.0;
                        gram[(o, c)] = 0.0;
                    }
                    gram[(c, c)] = 1.0;
                    numer.set_column(c, &self.loadings.column(c));
                }
            }
        }
        self.diagnostics.dead_components = dead;

        let solved = if self.nonneg.spectra {
            let mut system = gram;
            for c in 0..r {
                system[(c, c)] += mu_a;
            }
            nnls_solve(&system, &numer)
        } else {
            regularized_rdiv(&numer, &gram, mu_a)
        };
        solved.map_err(|e| e.in_context("loadings update"))
    }

    /// Solves for `A`, then normalizes its columns, moving the scales into every `D_h`.
    pub fn update_loadings(
        &mut self,
        slices: &SliceSet,
        mu_a: f64,
        partner: Option<&Matrix>,
    ) -> Result<()> {
        self.loadings = self.solve_loadings(slices, mu_a, partner)?;
        self.normalize_loadings();
        Ok(())
    }

    /// Per-slice `B_h = (X_h A D_h + mu_h P_h Bstar)(D_h A^T A D_h + mu_h I)^-1`.
    pub fn solve_scores(&self, slices: &SliceSet) -> Result<Vec<Matrix>> {
        let ata = self.loadings.tr_mul(&self.loadings);
        let nonneg = self.nonneg.scores;
        slices
            .slices()
            .par_iter()
            .enumerate()
            .map(|(h, x)| {
                let d = &self.amplitudes[h];
                let mu = self.coupling[h];
                let gram = scale_rows_and_columns(&ata, d);
                let numer = scale_columns(&(x * &self.loadings), d)
                    + &self.projections[h] * &self.latent * mu;
                let solved = if nonneg {
                    let mut system = gram;
                    for c in 0..system.nrows() {
                        system[(c, c)] += mu;
                    }
                    nnls_solve(&system, &numer)
                } else {
                    regularized_rdiv(&numer, &gram, mu)
                };
                solved.map_err(|e| e.in_context(format!("scores update, slice {h}")))
            })
            .collect()
    }

    pub fn update_scores(&mut self, slices: &SliceSet) -> Result<()> {
        self.scores = self.solve_scores(slices)?;
        Ok(())
    }

    /// Per-slice least-squares diagonal: `[(B^T B) ∘ (A^T A)] d = diag(B^T X A)`.
    pub fn solve_amplitudes(&self, slices: &SliceSet) -> Result<Vec<DVector<f64>>> {
        let ata = self.loadings.tr_mul(&self.loadings);
        let nonneg = self.nonneg.amplitudes;
        slices
            .slices()
            .par_iter()
            .enumerate()
            .map(|(h, x)| {
                let b = &self.scores[h];
                solve_diagonal(b, x, &self.loadings, &ata, nonneg)
                    .map_err(|e| e.in_context(format!("amplitude update, slice {h}")))
            })
            .collect()
    }

    pub fn update_amplitudes(&mut self, slices: &SliceSet) -> Result<()> {
        self.amplitudes = self.solve_amplitudes(slices)?;
        Ok(())
    }

    pub fn normalize_loadings(&mut self) {
        let scales = normalize_columns_in_place(&mut self.loadings);
        for d in &mut self.amplitudes {
            for (v, s) in d.iter_mut().zip(&scales) {
                *v *= s;
            }
        }
    }

    pub fn normalize_scores(&mut self) {
        self.scores
            .par_iter_mut()
            .zip(self.amplitudes.par_iter_mut())
            .for_each(|(b, d)| {
                let scales = normalize_columns_in_place(b);
                for (v, s) in d.iter_mut().zip(&scales) {
                    *v *= s;
                }
            });
    }

    /// Normalizes `A`, every `B_h` and `Bstar`; the `A` and `B_h` scales go into `D_h`.
    pub fn normalize(&mut self) {
        self.normalize_loadings();
        self.normalize_scores();
        normalize_columns_in_place(&mut self.latent);
    }

    /// Per-slice `(||X_h - B_h D_h A^T||^2, ||B_h - P_h Bstar||^2)`.
    pub fn slice_terms(&self, slices: &SliceSet) -> Vec<(f64, f64)> {
        slices
            .slices()
            .par_iter()
            .enumerate()
            .map(|(h, x)| {
                let ssr = slice_ssr(x, &self.scores[h], &self.amplitudes[h], &self.loadings);
                let coupling = (&self.scores[h] - &self.projections[h] * &self.latent).norm_squared();
                (ssr, coupling)
            })
            .collect()
    }

    /// Slice couplings from the SNR heuristic:
    /// `mu_h = 10^(-SNR_h/10) ||X_h - B_h D_h A^T||^2 / ||B_h - P_h Bstar||^2`.
    pub fn init_coupling_from_snr(&mut self, slices: &SliceSet) -> Result<()> {
        let terms = self.slice_terms(slices);
        let snrs: Vec<f64> = slices
            .slices()
            .par_iter()
            .map(estimate_snr)
            .collect::<Result<_>>()?;
        let diag = &mut self.diagnostics;
        diag.capped_snr.clear();
        diag.capped_coupling.clear();
        diag.floored_coupling.clear();
        for (h, ((&(ssr, coupling), &snr), x)) in terms.iter().zip(&snrs).zip(slices.slices()).enumerate() {
            if snr >= SNR_CAP {
                diag.capped_snr.push(h);
            }
            let mu = if coupling > 0.0 {
                10f64.powf(-snr / 10.0) * ssr / coupling
            } else {
                diag.capped_coupling.push(h);
                COUPLING_CAP
            };
            let floor = (COUPLING_FLOOR * x.norm_squared()).max(f64::MIN_POSITIVE);
            self.coupling[h] = if mu >= floor {
                mu
            } else {
                diag.floored_coupling.push(h);
                floor
            };
        }
        Ok(())
    }

    /// Multiplies every slice coupling by `cfg.mu_growth` while inside the growth window.
    pub fn grow_coupling(&mut self, cfg: &FlexConfig) {
        if self.iter >= 2 && self.iter < cfg.growth_iters + 1 {
            self.coupling.iter_mut().for_each(|mu| *mu *= cfg.mu_growth);
        }
    }

    fn maintain_coupling(&mut self, slices: &SliceSet, cfg: &FlexConfig) -> Result<()> {
        if self.iter == 1 {
            self.init_coupling_from_snr(slices)
        } else {
            self.grow_coupling(cfg);
            Ok(())
        }
    }

    /// One ALS sweep. `mu_a`/`partner` carry the spectral coupling to a partner
    /// model; pass `0.0`/`None` for a standalone fit.
    pub fn sweep(
        &mut self,
        slices: &SliceSet,
        cfg: &FlexConfig,
        mu_a: f64,
        partner: Option<&Matrix>,
    ) -> Result<()> {
        self.update_projections()?;
        self.update_latent();
        self.update_loadings(slices, mu_a, partner)?;
        self.update_scores(slices)?;
        self.normalize_scores();
        self.update_amplitudes(slices)?;
        self.maintain_coupling(slices, cfg)?;
        self.iter += 1;
        Ok(())
    }

    /// Data fit plus slice coupling terms, plus `mu_A ||A - A_partner||^2` when given.
    pub fn objective(&self, slices: &SliceSet, spectral: Option<(f64, &Matrix)>) -> f64 {
        let slice_sum: f64 = self
            .slice_terms(slices)
            .iter()
            .zip(&self.coupling)
            .map(|(&(ssr, coupling), &mu)| ssr + mu * coupling)
            .sum();
        let spectral_term = spectral
            .map(|(mu_a, partner)| mu_a * (&self.loadings - partner).norm_squared())
            .unwrap_or(0.0);
        slice_sum + spectral_term
    }

    /// `sum_h ||X_h - B_h D_h A^T||^2`.
    pub fn ssr(&self, slices: &SliceSet) -> f64 {
        self.slice_terms(slices).iter().map(|t| t.0).sum()
    }

    /// `B_h D_h` for slice `h`.
    pub fn scaled_scores(&self, h: usize) -> Matrix {
        scale_columns(&self.scores[h], &self.amplitudes[h])
    }
}

/// Least-squares diagonal `d` for `x ≈ b diag(d) a^T`, given `ata = a^T a`.
pub(crate) fn solve_diagonal(
    b: &Matrix,
    x: &Matrix,
    a: &Matrix,
    ata: &Matrix,
    nonneg: bool,
) -> Result<DVector<f64>> {
    let r = b.ncols();
    let btb = b.tr_mul(b);
    let gram = btb.component_mul(ata);
    let xa = x * a;
    let target = Matrix::from_fn(1, r, |_, c| b.column(c).dot(&xa.column(c)));
    let solved = if nonneg {
        nnls_solve(&gram, &target)?
    } else {
        regularized_rdiv(&target, &gram, 0.0)?
    };
    Ok(solved.row(0).transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlexTrace {
    /// Objective before the first sweep, then after every sweep.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub status: FitStatus,
}

/// Relative decrease `(old - new) / old`.
pub fn relative_change(old: f64, new: f64) -> f64 {
    if old == 0.0 {
        0.0
    } else {
        (old - new) / old
    }
}

/// Standalone flexible-coupling fit of one slice set.
pub fn fit_flex(slices: &SliceSet, cfg: &FlexConfig) -> Result<(FlexState, FlexTrace)> {
    let mut state = FlexState::init(slices, cfg)?;
    let mut objective = vec![state.objective(slices, None)];
    let mut status = FitStatus::MaxIters;
    for sweep in 1..=cfg.max_iters {
        state.sweep(slices, cfg, 0.0, None)?;
        let sigma = state.objective(slices, None);
        if !sigma.is_finite() {
            return Err(Error::Divergence {
                iteration: sweep,
                trace: objective,
            });
        }
        let old = *objective.last().expect("trace starts non-empty");
        objective.push(sigma);
        if cfg.coupling_frozen(sweep) && relative_change(old, sigma) < cfg.eps {
            status = FitStatus::Converged;
            break;
        }
    }
    let iterations = objective.len() - 1;
    Ok((
        state,
        FlexTrace {
            objective,
            iterations,
            status,
        },
    ))
}

/// Condition estimate of the Hadamard Gram used by the amplitude solve.
pub fn amplitude_condition(b: &Matrix, a: &Matrix) -> f64 {
    linalg::spd_condition(&b.tr_mul(b).component_mul(&a.tr_mul(a)))
}
