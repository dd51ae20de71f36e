//! Coupled PARAFAC2x2: two flexible-coupling models, one on the per-modulation
//! (KL) slices and one on the per-acquisition (IL) slices, whose spectral
//! loadings are tied by `mu_A ||A_kl - A_il||_F^2`.
//!
//! The driver runs several seeded starts for a burn-in, keeps the one with the
//! lowest objective, continues it to convergence and assembles per-sample
//! elution surfaces, consensus spectra and sample abundances.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flex::{relative_change, solve_diagonal, FitStatus, FlexConfig, FlexState};
use crate::linalg::spd_condition;
use crate::metrics::{percent_var, unfold_profiles};
use crate::tensor::{normalize_columns_in_place, unfold, DenseTensor4, Matrix, SliceKey, SliceSet, UnfoldMode};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Abundance Grams above this condition number are flagged in the report.
const CONDITION_WARNING: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoupledConfig {
    pub flex: FlexConfig,
    /// Exponent of the spectral coupling initialization.
    pub omega: f64,
    pub n_starts: usize,
    pub burn_iters: usize,
    pub seed: u64,
    pub spectral_scale: SpectralScale,
    /// Fixed spectral coupling; disables its initialization and growth.
    pub fixed_mu_a: Option<f64>,
}

impl Default for CoupledConfig {
    fn default() -> Self {
        Self {
            flex: FlexConfig::default(),
            omega: 3.0,
            n_starts: 10,
            burn_iters: 80,
            seed: 0,
            spectral_scale: SpectralScale::PerEntry,
            fixed_mu_a: None,
        }
    }
}

impl CoupledConfig {
    pub fn validate(&self) -> Result<()> {
        self.flex.validate()?;
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be >= 1".into()));
        }
        if self.burn_iters == 0 {
            return Err(Error::Config("burn_iters must be >= 1".into()));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config(format!("omega must be finite, got {}", self.omega)));
        }
        if let Some(mu) = self.fixed_mu_a {
            if !(mu >= 0.0) || !mu.is_finite() {
                return Err(Error::Config(format!("fixed_mu_a must be finite and >= 0, got {mu}")));
            }
        }
        Ok(())
    }

    fn grows_mu_a(&self, sweep: usize) -> bool {
        self.fixed_mu_a.is_none() && sweep >= 2 && sweep < self.flex.growth_iters + 1
    }
}

/// Seed of start `start` derived from the master seed (SplitMix64 finalizer).
pub fn start_seed(master: u64, start: usize) -> u64 {
    let mut z = master.wrapping_add((start as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How the residuals enter the spectral coupling initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralScale {
    /// Mean squared residual per tensor entry.
    #[default]
    PerEntry,
    /// Total squared residual. The coupling then starts around `10^omega`
    /// times the loadings Gram, which stalls the spectra for `omega > 0`.
    Total,
}

/// `10^omega * (SSR_kl + SSR_il) / ||A_kl||_F^2`, with each SSR divided by the
/// number of tensor entries under [`SpectralScale::PerEntry`].
pub fn init_mu_a(
    kl: &FlexState,
    il: &FlexState,
    s_kl: &SliceSet,
    s_il: &SliceSet,
    omega: f64,
    scale: SpectralScale,
) -> f64 {
    let residual = kl.ssr(s_kl) + il.ssr(s_il);
    let residual = match scale {
        SpectralScale::Total => residual,
        SpectralScale::PerEntry => residual / s_kl.tensor_shape().iter().product::<usize>() as f64,
    };
    10f64.powf(omega) * residual / kl.loadings.norm_squared()
}

/// One start of the coupled fit.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub kl: FlexState,
    pub il: FlexState,
    pub mu_a: f64,
    pub mu_a_initial: f64,
    /// Completed sweeps.
    pub sweeps: usize,
    /// Full objective before the first sweep, then after every sweep.
    pub objective: Vec<f64>,
    /// Each unfolding's own objective, without the spectral term.
    pub kl_objective: Vec<f64>,
    pub il_objective: Vec<f64>,
    pub converged: bool,
}

impl CoupledRun {
    pub fn init(s_kl: &SliceSet, s_il: &SliceSet, cfg: &CoupledConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let flex = FlexConfig { seed, ..cfg.flex.clone() };
        let kl = FlexState::init(s_kl, &flex)?;
        let il = FlexState::init(s_il, &flex)?;
        let mu_a = match cfg.fixed_mu_a {
            Some(mu) => mu,
            None => init_mu_a(&kl, &il, s_kl, s_il, cfg.omega, cfg.spectral_scale),
        };
        let mut run = Self {
            kl,
            il,
            mu_a,
            mu_a_initial: mu_a,
            sweeps: 0,
            objective: Vec::new(),
            kl_objective: Vec::new(),
            il_objective: Vec::new(),
            converged: false,
        };
        run.record(s_kl, s_il);
        Ok(run)
    }

    fn record(&mut self, s_kl: &SliceSet, s_il: &SliceSet) -> f64 {
        let kl = self.kl.objective(s_kl, None);
        let il = self.il.objective(s_il, None);
        let sigma = kl + il + self.spectral_term();
        self.kl_objective.push(kl);
        self.il_objective.push(il);
        self.objective.push(sigma);
        sigma
    }

    pub fn spectral_term(&self) -> f64 {
        self.mu_a * (&self.kl.loadings - &self.il.loadings).norm_squared()
    }

    /// Full objective evaluated from scratch for the current factors.
    pub fn sigma(&self, s_kl: &SliceSet, s_il: &SliceSet) -> f64 {
        self.kl.objective(s_kl, None) + self.il.objective(s_il, None) + self.spectral_term()
    }

    pub fn last_sigma(&self) -> f64 {
        *self.objective.last().expect("objective trace starts non-empty")
    }

    /// One full sweep over both unfoldings (KL first) followed by the spectral
    /// coupling schedule. Returns the new objective.
    pub fn sweep(&mut self, s_kl: &SliceSet, s_il: &SliceSet, cfg: &CoupledConfig) -> Result<f64> {
        let mu_a = self.mu_a;
        let spectral = mu_a > 0.0;
        self.kl.sweep(s_kl, &cfg.flex, mu_a, spectral.then_some(&self.il.loadings))?;
        self.il.sweep(s_il, &cfg.flex, mu_a, spectral.then_some(&self.kl.loadings))?;
        self.sweeps += 1;
        if cfg.grows_mu_a(self.sweeps) {
            self.mu_a *= cfg.flex.mu_growth;
        }
        let old = self.last_sigma();
        let sigma = self.record(s_kl, s_il);
        if !sigma.is_finite() {
            return Err(Error::Divergence {
                iteration: self.sweeps,
                trace: self.objective.clone(),
            });
        }
        if cfg.flex.coupling_frozen(self.sweeps) && relative_change(old, sigma) < cfg.flex.eps {
            self.converged = true;
        }
        Ok(sigma)
    }

    /// Sweeps until converged or `limit` total sweeps have been done.
    pub fn advance(&mut self, s_kl: &SliceSet, s_il: &SliceSet, cfg: &CoupledConfig, limit: usize) -> Result<()> {
        while !self.converged && self.sweeps < limit {
            self.sweep(s_kl, s_il, cfg)?;
        }
        Ok(())
    }
}

/// Sums both unfoldings' `B_h D_h` into per-sample `[I, R, K, L]` surfaces and
/// normalizes every `(component, sample)` surface to unit Frobenius norm.
pub fn assemble_profiles(kl: &FlexState, il: &FlexState, s_kl: &SliceSet, s_il: &SliceSet) -> Result<DenseTensor4> {
    let shape = s_kl.tensor_shape();
    if s_il.tensor_shape() != shape {
        return Err(Error::dim("KL and IL slice sets come from different tensors"));
    }
    let [ni, _, nk, nl] = shape;
    let nr = kl.rank();
    if il.rank() != nr {
        return Err(Error::dim(format!("ranks differ: {} vs {}", nr, il.rank())));
    }
    let mut profiles = DenseTensor4::zeros([ni, nr, nk, nl])?;
    for (h, key) in s_kl.keys().iter().enumerate() {
        let SliceKey::Modulation { k, sample } = *key else {
            return Err(Error::dim("first slice set is not a KL unfolding"));
        };
        let bd = kl.scaled_scores(h);
        for r in 0..nr {
            for i in 0..ni {
                let off = profiles.offset(i, r, k, sample);
                profiles.data_mut()[off] += bd[(i, r)];
            }
        }
    }
    for (h, key) in s_il.keys().iter().enumerate() {
        let SliceKey::Acquisition { i, sample } = *key else {
            return Err(Error::dim("second slice set is not an IL unfolding"));
        };
        let bd = il.scaled_scores(h);
        for r in 0..nr {
            for k in 0..nk {
                let off = profiles.offset(i, r, k, sample);
                profiles.data_mut()[off] += bd[(k, r)];
            }
        }
    }
    normalize_profiles(&mut profiles);
    Ok(profiles)
}

/// Scales every `(component, sample)` surface to unit norm; all-zero surfaces stay zero.
pub fn normalize_profiles(profiles: &mut DenseTensor4) {
    let [ni, nr, nk, nl] = profiles.shape();
    for l in 0..nl {
        for r in 0..nr {
            let mut sq = 0.0;
            for i in 0..ni {
                for k in 0..nk {
                    sq += profiles.get(i, r, k, l).powi(2);
                }
            }
            if sq > 0.0 {
                let inv = 1.0 / sq.sqrt();
                for i in 0..ni {
                    for k in 0..nk {
                        let v = profiles.get(i, r, k, l);
                        profiles.set(i, r, k, l, v * inv);
                    }
                }
            }
        }
    }
}

/// Sample `l` of `x` as an `(I*K) x J` matrix, row `i*K + k`.
fn sample_matrix(x: &DenseTensor4, l: usize) -> Matrix {
    let [_, nj, nk, _] = x.shape();
    Matrix::from_fn(x.acquisitions() * nk, nj, |row, j| x.get(row / nk, j, row % nk, l))
}

/// Per-sample abundances: `[(F_l^T F_l) ∘ (A^T A)] d_l = diag(F_l^T X_l A)`.
pub fn solve_abundances(
    profiles: &DenseTensor4,
    x: &DenseTensor4,
    spectra: &Matrix,
    nonneg: bool,
) -> Result<Vec<DVector<f64>>> {
    let [ni, nj, nk, nl] = x.shape();
    let [pi, pr, pk, pl] = profiles.shape();
    if (pi, pk, pl) != (ni, nk, nl) || spectra.shape() != (nj, pr) {
        return Err(Error::dim(format!(
            "profiles {:?} and spectra {:?} do not match data {:?}",
            profiles.shape(),
            spectra.shape(),
            x.shape()
        )));
    }
    let ata = spectra.tr_mul(spectra);
    (0..nl)
        .into_par_iter()
        .map(|l| {
            let f = unfold_profiles(profiles, l);
            solve_diagonal(&f, &sample_matrix(x, l), spectra, &ata, nonneg)
                .map_err(|e| e.in_context(format!("abundances of sample {l}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub index: usize,
    pub seed: u64,
    /// Objective after the burn-in, absent when the start failed.
    pub sigma: Option<f64>,
    pub sweeps: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentDiagnostics {
    pub dead_components: Vec<usize>,
    pub condition_warnings: Vec<String>,
    pub degenerate_projections: usize,
    pub floored_couplings: usize,
    pub capped_snr: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub rank: usize,
    pub status: FitStatus,
    pub objective_trace: Vec<f64>,
    pub kl_trace: Vec<f64>,
    pub il_trace: Vec<f64>,
    pub percent_var: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub per_start: Vec<StartSummary>,
    pub selected_start: usize,
    pub mu_a_initial: f64,
    pub mu_a_final: f64,
    pub diagnostics: ComponentDiagnostics,
}

#[derive(Debug, Clone)]
pub struct CoupledModel {
    pub state_kl: FlexState,
    pub state_il: FlexState,
    pub mu_a: f64,
    /// Elution surfaces `[I, R, K, L]`, unit norm per component and sample.
    pub profiles: DenseTensor4,
    /// Per-sample abundance vectors of length `R`.
    pub abundances: Vec<DVector<f64>>,
    /// Consensus spectra `J x R`, unit-norm columns.
    pub spectra: Matrix,
    pub report: FitReport,
}

impl CoupledModel {
    pub fn rank(&self) -> usize {
        self.spectra.ncols()
    }
}

/// Final factors of a finished run.
pub fn finalize(
    run: CoupledRun,
    x: &DenseTensor4,
    s_kl: &SliceSet,
    s_il: &SliceSet,
    cfg: &CoupledConfig,
) -> Result<CoupledModel> {
    let profiles = assemble_profiles(&run.kl, &run.il, s_kl, s_il)?;
    let mut spectra = &run.kl.loadings + &run.il.loadings;
    normalize_columns_in_place(&mut spectra);
    let abundances = solve_abundances(&profiles, x, &spectra, cfg.flex.nonneg.amplitudes)?;

    let mut diagnostics = ComponentDiagnostics::default();
    for state in [&run.kl, &run.il] {
        let d = &state.diagnostics;
        diagnostics.dead_components.extend(&d.dead_components);
        diagnostics.degenerate_projections += d.degenerate_projections;
        diagnostics.floored_couplings += d.floored_coupling.len();
        diagnostics.capped_snr += d.capped_snr.len();
    }
    diagnostics.dead_components.sort_unstable();
    diagnostics.dead_components.dedup();
    let ata = spectra.tr_mul(&spectra);
    for l in 0..x.samples() {
        let f = unfold_profiles(&profiles, l);
        let cond = spd_condition(&f.tr_mul(&f).component_mul(&ata));
        if cond > CONDITION_WARNING {
            diagnostics
                .condition_warnings
                .push(format!("sample {l}: abundance system condition {cond:.3e}"));
        }
    }

    let pv = percent_var(x, &profiles, &abundances, &spectra)?;
    let report = FitReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rank: spectra.ncols(),
        status: if run.converged {
            FitStatus::Converged
        } else {
            FitStatus::MaxIters
        },
        iterations: run.sweeps,
        objective_trace: run.objective,
        kl_trace: run.kl_objective,
        il_trace: run.il_objective,
        percent_var: pv,
        wall_time_s: 0.0,
        per_start: Vec::new(),
        selected_start: 0,
        mu_a_initial: run.mu_a_initial,
        mu_a_final: run.mu_a,
        diagnostics,
    };
    Ok(CoupledModel {
        state_kl: run.kl,
        state_il: run.il,
        mu_a: run.mu_a,
        profiles,
        abundances,
        spectra,
        report,
    })
}

/// Multi-start coupled fit. Starts run in parallel for the burn-in; the one
/// with the lowest objective (lowest index on ties) is continued.
pub fn fit(x: &DenseTensor4, cfg: &CoupledConfig) -> Result<CoupledModel> {
    cfg.validate()?;
    if !x.is_finite() {
        return Err(Error::UndefinedInput("tensor contains non-finite values".into()));
    }
    let started = Instant::now();
    let s_kl = unfold(x, UnfoldMode::Kl);
    let s_il = unfold(x, UnfoldMode::Il);
    let burn = cfg.burn_iters.min(cfg.flex.max_iters);

    let runs: Vec<(u64, Result<CoupledRun>)> = (0..cfg.n_starts)
        .into_par_iter()
        .map(|s| {
            let seed = start_seed(cfg.seed, s);
            let run = CoupledRun::init(&s_kl, &s_il, cfg, seed).and_then(|mut run| {
                run.advance(&s_kl, &s_il, cfg, burn)?;
                Ok(run)
            });
            (seed, run)
        })
        .collect();

    let mut per_start = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, CoupledRun)> = None;
    let mut failures = Vec::new();
    for (index, (seed, run)) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                let sigma = run.last_sigma();
                per_start.push(StartSummary {
                    index,
                    seed,
                    sigma: Some(sigma),
                    sweeps: run.sweeps,
                    error: None,
                });
                log::debug!("start {index}: sigma {sigma:.6e} after {} sweeps", run.sweeps);
                if best.as_ref().is_none_or(|(_, b)| sigma < b.last_sigma()) {
                    best = Some((index, run));
                }
            }
            Err(e) => {
                failures.push(format!("start {index} (seed {seed}): {e}"));
                per_start.push(StartSummary {
                    index,
                    seed,
                    sigma: None,
                    sweeps: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let Some((selected, mut run)) = best else {
        return Err(Error::AllStartsFailed(failures));
    };
    log::info!("selected start {selected} with sigma {:.6e}", run.last_sigma());

    run.advance(&s_kl, &s_il, cfg, cfg.flex.max_iters)?;
    let mut model = finalize(run, x, &s_kl, &s_il, cfg)?;
    model.report.per_start = per_start;
    model.report.selected_start = selected;
    model.report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(model)
}
