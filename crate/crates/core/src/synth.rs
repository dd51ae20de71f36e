//! Synthetic multi-sample GC×GC-TOFMS regions with independent retention drift
//! in both chromatographic modes and known ground truth.
//!
//! Every component has a random spectrum and a separable Gaussian elution
//! surface whose apex drifts independently per sample in both retention
//! modes. The tensor is
//!
//! ```text
//! X[i, j, k, l] = scale * sum_r map_{r,l}[i, k] * spectrum_r[j] + noise + offset
//! ```
//!
//! with Gaussian noise of standard deviation `max_score / snr` and a constant
//! offset of `offset_factor * max_score / snr`, where `max_score` is the
//! largest value of any (unscaled) elution surface. Noise is redrawn whenever
//! it would fall below `-offset`, so every entry is strictly positive.

use nalgebra::DVector;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor4, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub acquisitions: usize,
    pub channels: usize,
    pub modulations: usize,
    pub samples: usize,
    pub rank: usize,
    /// Maximum first-dimension drift, in modulations.
    pub drift1_max: f64,
    /// Maximum second-dimension drift, in acquisitions.
    pub drift2_max: f64,
    /// First-dimension peak width (standard deviation), in modulations.
    pub sigma1: f64,
    /// Second-dimension peak width (standard deviation), in acquisitions.
    pub sigma2: f64,
    pub snr: f64,
    pub offset_factor: f64,
    pub scale: f64,
    pub n_ms_peaks: usize,
    /// Fraction of each retention axis, centred on the region, that holds the
    /// undrifted apexes.
    pub apex_window: f64,
    /// Per-component, per-sample amplitude multipliers (`[component][sample]`);
    /// all ones when absent.
    pub amplitudes: Option<Vec<Vec<f64>>>,
    /// Places components 0 and 1 on top of each other in this sample.
    pub overlap_sample: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            acquisitions: 200,
            channels: 45,
            modulations: 20,
            samples: 3,
            rank: 2,
            drift1_max: 1.5,
            drift2_max: 25.0,
            sigma1: 1.5,
            sigma2: 20.0,
            snr: 500.0,
            offset_factor: 6.0,
            scale: 1e4,
            n_ms_peaks: 45,
            apex_window: 0.3,
            amplitudes: None,
            overlap_sample: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Hard validation; returns soft warnings (e.g. a region too small to hold
    /// drifted peaks) on success.
    pub fn validate(&self) -> Result<Vec<String>> {
        let fail = |m: String| Err(Error::Config(m));
        if [self.acquisitions, self.channels, self.modulations, self.samples, self.rank].contains(&0) {
            return fail("dims and rank must be >= 1".into());
        }
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0) {
            return fail("peak widths must be > 0".into());
        }
        if !(self.snr > 0.0) {
            return fail(format!("snr must be > 0, got {}", self.snr));
        }
        if !(self.drift1_max >= 0.0 && self.drift2_max >= 0.0) {
            return fail("drift bounds must be >= 0".into());
        }
        if !(self.scale > 0.0) || !(self.offset_factor >= 0.0) {
            return fail("scale must be > 0 and offset_factor >= 0".into());
        }
        if self.n_ms_peaks == 0 || self.n_ms_peaks > self.channels {
            return fail(format!(
                "n_ms_peaks must be in 1..={}, got {}",
                self.channels, self.n_ms_peaks
            ));
        }
        if !(0.0..=1.0).contains(&self.apex_window) {
            return fail("apex_window must be in [0, 1]".into());
        }
        if let Some(amps) = &self.amplitudes {
            if amps.len() != self.rank || amps.iter().any(|row| row.len() != self.samples) {
                return fail(format!(
                    "amplitudes must be {} rows of {} values",
                    self.rank, self.samples
                ));
            }
            if amps.iter().flatten().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                return fail("amplitudes must be finite and >= 0".into());
            }
        }
        if let Some(l) = self.overlap_sample {
            if l >= self.samples || self.rank < 2 {
                return fail("overlap_sample needs rank >= 2 and a valid sample index".into());
            }
        }

        let mut warnings = Vec::new();
        let need2 = 2.0 * self.drift2_max + 6.0 * self.sigma2;
        if (self.acquisitions as f64) <= need2 {
            warnings.push(format!(
                "{} acquisitions may truncate drifted peaks (recommended > {need2})",
                self.acquisitions
            ));
        }
        let need1 = 2.0 * self.drift1_max + 6.0 * self.sigma1;
        if (self.modulations as f64) <= need1 {
            warnings.push(format!(
                "{} modulations may truncate drifted peaks (recommended > {need1})",
                self.modulations
            ));
        }
        Ok(warnings)
    }

    fn amplitude(&self, r: usize, l: usize) -> f64 {
        self.amplitudes.as_ref().map_or(1.0, |a| a[r][l])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApexPlacement {
    /// First-dimension apex, in modulations.
    pub modulation: f64,
    /// Second-dimension apex, in acquisitions.
    pub acquisition: f64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// `J x R`, unit-norm columns.
    pub spectra: Matrix,
    /// Scaled elution surfaces, shape `[I, R, K, L]` (same layout as fitted profiles).
    pub score_maps: DenseTensor4,
    /// `[component][sample]` Frobenius norm of the scaled elution surface.
    pub abundances: Vec<Vec<f64>>,
    /// `[component][sample]` apex positions after drift.
    pub apexes: Vec<Vec<ApexPlacement>>,
    pub noise_sd: f64,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub tensor: DenseTensor4,
    pub truth: GroundTruth,
    pub warnings: Vec<String>,
}

/// Non-negative unit vector with `n_peaks` spikes of uniform height at distinct channels.
pub fn random_spectrum<R: Rng + ?Sized>(channels: usize, n_peaks: usize, rng: &mut R) -> Result<DVector<f64>> {
    if n_peaks == 0 || n_peaks > channels {
        return Err(Error::Config(format!(
            "need 1..={channels} spectral peaks, got {n_peaks}"
        )));
    }
    let mut spectrum = DVector::zeros(channels);
    for j in sample_indices(rng, channels, n_peaks).into_vec() {
        spectrum[j] = 1.0 - rng.random::<f64>();
    }
    let norm = spectrum.norm();
    Ok(spectrum / norm)
}

/// Separable Gaussian surface on the `acquisitions x modulations` grid with
/// unit height at the (possibly off-grid) apex.
pub fn gaussian_peak_map(
    acquisitions: usize,
    modulations: usize,
    apex1: f64,
    apex2: f64,
    sigma1: f64,
    sigma2: f64,
) -> Matrix {
    let first: Vec<f64> = (0..modulations)
        .map(|k| (-(k as f64 - apex1).powi(2) / (2.0 * sigma1 * sigma1)).exp())
        .collect();
    let second: Vec<f64> = (0..acquisitions)
        .map(|i| (-(i as f64 - apex2).powi(2) / (2.0 * sigma2 * sigma2)).exp())
        .collect();
    Matrix::from_fn(acquisitions, modulations, |i, k| second[i] * first[k])
}

pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    let warnings = cfg.validate()?;
    let (ni, nj, nk, nl, nr) = (cfg.acquisitions, cfg.channels, cfg.modulations, cfg.samples, cfg.rank);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut spectra = Matrix::zeros(nj, nr);
    for r in 0..nr {
        spectra.set_column(r, &random_spectrum(nj, cfg.n_ms_peaks, &mut rng)?);
    }

    let centre1 = (nk as f64 - 1.0) / 2.0;
    let centre2 = (ni as f64 - 1.0) / 2.0;
    let half1 = cfg.apex_window * nk as f64 / 2.0;
    let half2 = cfg.apex_window * ni as f64 / 2.0;
    let symmetric = |half: f64, rng: &mut ChaCha8Rng| half * (2.0 * rng.random::<f64>() - 1.0);

    let mut apexes = Vec::with_capacity(nr);
    for _ in 0..nr {
        let base1 = centre1 + symmetric(half1, &mut rng);
        let base2 = centre2 + symmetric(half2, &mut rng);
        let per_sample: Vec<ApexPlacement> = (0..nl)
            .map(|_| ApexPlacement {
                modulation: base1 + symmetric(cfg.drift1_max, &mut rng),
                acquisition: base2 + symmetric(cfg.drift2_max, &mut rng),
            })
            .collect();
        apexes.push(per_sample);
    }
    if let Some(l) = cfg.overlap_sample {
        // Near-complete coelution: a tenth of a peak width apart in both modes.
        apexes[1][l] = ApexPlacement {
            modulation: apexes[0][l].modulation + 0.1 * cfg.sigma1,
            acquisition: apexes[0][l].acquisition + 0.1 * cfg.sigma2,
        };
    }

    let mut maps = Vec::with_capacity(nr * nl);
    let mut max_score = 0.0f64;
    for (r, per_sample) in apexes.iter().enumerate() {
        for (l, apex) in per_sample.iter().enumerate() {
            let map = gaussian_peak_map(ni, nk, apex.modulation, apex.acquisition, cfg.sigma1, cfg.sigma2)
                * cfg.amplitude(r, l);
            max_score = max_score.max(map.max());
            maps.push(map);
        }
    }

    let mut score_maps = DenseTensor4::zeros([ni, nr, nk, nl])?;
    let mut abundances = vec![vec![0.0; nl]; nr];
    for r in 0..nr {
        for l in 0..nl {
            let map = &maps[r * nl + l];
            abundances[r][l] = cfg.scale * map.norm();
            for k in 0..nk {
                for i in 0..ni {
                    score_maps.set(i, r, k, l, cfg.scale * map[(i, k)]);
                }
            }
        }
    }

    let noise_sd = max_score / cfg.snr;
    let offset = cfg.offset_factor * noise_sd;
    let mut x = DenseTensor4::zeros([ni, nj, nk, nl])?;
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                for l in 0..nl {
                    let signal: f64 = (0..nr)
                        .map(|r| score_maps.get(i, r, k, l) * spectra[(j, r)])
                        .sum();
                    let noise = loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let e = z * noise_sd;
                        if e > -offset || offset == 0.0 {
                            break e;
                        }
                    };
                    x.set(i, j, k, l, signal + noise + offset);
                }
            }
        }
    }

    Ok(Synthetic {
        tensor: x,
        truth: GroundTruth {
            spectra,
            score_maps,
            abundances,
            apexes,
            noise_sd,
            offset,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_is_unit_and_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 10, 45] {
            let s = random_spectrum(45, n, &mut rng).unwrap();
            assert!((s.norm() - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|&v| v >= 0.0));
            assert_eq!(s.iter().filter(|&&v| v > 0.0).count(), n);
        }
        assert!(random_spectrum(10, 11, &mut rng).is_err());
    }

    #[test]
    fn spectra_from_different_seeds_are_distinct() {
        let spectra: Vec<_> = (0..100)
            .map(|seed| random_spectrum(45, 45, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
            .collect();
        let below = spectra
            .windows(2)
            .filter(|w| w[0].dot(&w[1]) < 0.9)
            .count();
        assert!(below >= 90, "only {below}/99 pairs below cosine 0.9");
    }

    #[test]
    fn peak_map_symmetric_about_centre() {
        let m = gaussian_peak_map(21, 11, 5.0, 10.0, 1.5, 4.0);
        assert_eq!(m[(10, 5)], 1.0);
        assert_eq!(m.max(), 1.0);
        for i in 0..21 {
            for k in 0..11 {
                assert!((m[(i, k)] - m[(20 - i, 10 - k)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn peak_map_narrow_width_concentrates_mass() {
        let m = gaussian_peak_map(30, 9, 4.0, 12.0, 1.5, 1e-3);
        let total: f64 = m.iter().sum();
        let row: f64 = m.row(12).iter().sum();
        assert!((row / total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn peak_map_marginals_match_1d_gaussians() {
        let (apex1, apex2, s1, s2) = (3.3, 17.8, 1.5, 6.0);
        let m = gaussian_peak_map(40, 8, apex1, apex2, s1, s2);
        let g1: Vec<f64> = (0..8).map(|k| (-(k as f64 - apex1).powi(2) / (2.0 * s1 * s1)).exp()).collect();
        let g2: Vec<f64> = (0..40).map(|i| (-(i as f64 - apex2).powi(2) / (2.0 * s2 * s2)).exp()).collect();
        let sum1: f64 = g1.iter().sum();
        let sum2: f64 = g2.iter().sum();
        for i in 0..40 {
            let row: f64 = m.row(i).iter().sum();
            assert!((row - g2[i] * sum1).abs() < 1e-13);
        }
        for k in 0..8 {
            let col: f64 = m.column(k).iter().sum();
            assert!((col - g1[k] * sum2).abs() < 1e-12);
        }
    }

    fn small() -> SynthConfig {
        SynthConfig {
            acquisitions: 60,
            modulations: 12,
            channels: 20,
            n_ms_peaks: 12,
            drift2_max: 5.0,
            sigma2: 5.0,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn generated_tensor_is_positive_and_deterministic() {
        let cfg = small();
        let a = generate(&cfg).unwrap();
        assert!(a.tensor.data().iter().all(|&v| v > 0.0));
        let b = generate(&cfg).unwrap();
        assert_eq!(a.tensor, b.tensor);

        let c = generate(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.tensor, c.tensor);
        assert_ne!(
            a.truth.apexes[0][0].acquisition,
            c.truth.apexes[0][0].acquisition
        );
    }

    #[test]
    fn noiseless_limit_is_exact_sum_of_terms() {
        let cfg = SynthConfig {
            snr: f64::INFINITY,
            ..small()
        };
        let syn = generate(&cfg).unwrap();
        let t = &syn.truth;
        assert_eq!(t.noise_sd, 0.0);
        let [ni, nj, nk, nl] = syn.tensor.shape();
        for l in 0..nl {
            for k in 0..nk {
                for j in 0..nj {
                    for i in 0..ni {
                        let expected: f64 = (0..cfg.rank)
                            .map(|r| t.score_maps.get(i, r, k, l) * t.spectra[(j, r)])
                            .sum();
                        assert!((syn.tensor.get(i, j, k, l) - expected).abs() <= 1e-12 * cfg.scale);
                    }
                }
            }
        }
    }

    #[test]
    fn noise_variance_is_near_nominal_per_channel() {
        let cfg = small();
        let syn = generate(&cfg).unwrap();
        let t = &syn.truth;
        let [ni, nj, nk, nl] = syn.tensor.shape();
        let nominal = t.noise_sd * t.noise_sd;
        for j in 0..nj {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let n = (ni * nk * nl) as f64;
            for i in 0..ni {
                for k in 0..nk {
                    for l in 0..nl {
                        let clean: f64 = (0..cfg.rank)
                            .map(|r| t.score_maps.get(i, r, k, l) * t.spectra[(j, r)])
                            .sum();
                        let e = syn.tensor.get(i, j, k, l) - clean - t.offset;
                        sum += e;
                        sq += e * e;
                    }
                }
            }
            let var = sq / n - (sum / n).powi(2);
            assert!(var < 3.0 * nominal && var > nominal / 3.0, "channel {j}: {var} vs {nominal}");
        }
    }

    #[test]
    fn abundances_are_scaled_map_norms() {
        let cfg = SynthConfig {
            amplitudes: Some(vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.5, 0.5]]),
            ..small()
        };
        let syn = generate(&cfg).unwrap();
        let t = &syn.truth;
        for r in 0..2 {
            for l in 0..3 {
                let mut sq = 0.0;
                for i in 0..cfg.acquisitions {
                    for k in 0..cfg.modulations {
                        sq += t.score_maps.get(i, r, k, l).powi(2);
                    }
                }
                assert!((t.abundances[r][l] - sq.sqrt()).abs() <= 1e-9 * t.abundances[r][l]);
            }
        }
    }

    #[test]
    fn overlap_sample_coelutes_first_two_components() {
        let cfg = SynthConfig {
            rank: 3,
            overlap_sample: Some(0),
            ..small()
        };
        let syn = generate(&cfg).unwrap();
        let a = &syn.truth.apexes;
        assert!((a[0][0].acquisition - a[1][0].acquisition).abs() <= 0.1 * cfg.sigma2 + 1e-12);
        assert!((a[0][0].modulation - a[1][0].modulation).abs() <= 0.1 * cfg.sigma1 + 1e-12);
    }

    #[test]
    fn small_region_warns() {
        let cfg = SynthConfig {
            acquisitions: 100,
            ..Default::default()
        };
        let warnings = cfg.validate().unwrap();
        assert!(warnings.iter().any(|w| w.contains("acquisitions")));
        assert!(SynthConfig::default().validate().unwrap().is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { sigma1: 0.0, ..Default::default() },
            SynthConfig { snr: -1.0, ..Default::default() },
            SynthConfig { n_ms_peaks: 46, ..Default::default() },
            SynthConfig { amplitudes: Some(vec![vec![1.0]]), ..Default::default() },
            SynthConfig { overlap_sample: Some(5), ..Default::default() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }
}
