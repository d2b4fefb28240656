//! Snapshot generation.
//!
//! The measurable distribution is the uniform mixture over the hidden
//! relative phase of the fixed-phase multinomial, so the large-N sampler
//! draws `theta ~ U[0, 2 pi)` and then per-bin counts from the binned density
//! at that phase. A conditioned-Poisson variant cross-checks the
//! multinomial conditioning argument, and for tiny systems the exact
//! distribution is enumerated and sampled directly.
//!
//! Every shot consumes its own counter-derived RNG stream, so batches are
//! reproducible and identical for any worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

use crate::binning::{BinGrid, BinnedDensity, Snapshot};
use crate::error::{Error, Result};
use crate::fcs::{enumerate_snapshots, exact_probabilities, OverlapKernel, QuadratureSpec};
use crate::physics::TwoCloudState;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const REJECTION_LIMIT: u64 = 1_000_000;

/// How snapshots are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Categorical draw from the exactly enumerated distribution (N <= 4, K <= 6).
    ExactEnumeration,
    /// Hidden phase, then a multinomial over the binned density (default).
    ThetaMultinomial,
    /// Hidden phase, then independent Poisson counts conditioned on the total.
    ThetaPoisson,
}

/// Sampler parameters; `pin_theta` freezes the hidden phase for calibration
/// and diagnostic runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub shots: u64,
    pub seed: u64,
    pub pin_theta: Option<f64>,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots < 1 {
            return Err(Error::NonPositiveParameter {
                name: "shots",
                value: self.shots as f64,
            });
        }
        Ok(())
    }
}

/// One generated measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub shot_index: u64,
    /// The phase behind this shot; absent for the enumeration sampler, and
    /// never part of the "experimental" export.
    pub hidden_theta: Option<f64>,
    pub snapshot: Snapshot,
    pub rng_stream_id: u64,
}

/// Reusable sampler bound to one state and mesh.
pub struct SnapshotSampler {
    kernel: OverlapKernel,
    config: SamplerConfig,
    /// Enumerated snapshots plus cumulative probabilities (enumeration mode).
    table: Option<(Vec<Snapshot>, Vec<f64>)>,
}

impl SnapshotSampler {
    pub fn new(state: &TwoCloudState, bins: &BinGrid, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let kernel = OverlapKernel::new(state, bins)?;
        let config = SamplerConfig {
            pin_theta: config.pin_theta.map(|t| t.rem_euclid(TWO_PI)),
            ..config
        };
        let table = if config.mode == SamplerMode::ExactEnumeration {
            let n = state.total();
            let k = bins.len();
            if n > 4 || k > 6 {
                return Err(Error::EnumerationDomainExceeded {
                    particles: n,
                    bins: k,
                });
            }
            let snaps = enumerate_snapshots(n, k);
            let probs = match config.pin_theta {
                Some(theta) => snaps
                    .iter()
                    .map(|s| crate::fcs::partial_probability_kernel(&kernel, s, theta))
                    .collect::<Vec<_>>(),
                None => {
                    exact_probabilities(state, bins, &snaps, &QuadratureSpec::for_state(state))?
                }
            };
            let mut cumulative = Vec::with_capacity(probs.len());
            let mut acc = 0.0;
            for p in probs {
                acc += p.max(0.0);
                cumulative.push(acc);
            }
            // guard the final edge against quadrature roundoff
            if let Some(last) = cumulative.last_mut() {
                *last = last.max(1.0);
            }
            Some((snaps, cumulative))
        } else {
            None
        };
        Ok(Self {
            kernel,
            config,
            table,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn kernel(&self) -> &OverlapKernel {
        &self.kernel
    }

    /// Draws shot `shot_index`; a pure function of `(config.seed, shot_index)`.
    pub fn sample(&self, shot_index: u64) -> Result<ShotRecord> {
        let stream_id = self.config.seed ^ shot_index;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream_id);
        let n = self.kernel.total();
        let (hidden_theta, snapshot) = match self.config.mode {
            SamplerMode::ExactEnumeration => {
                let (snaps, cumulative) = self.table.as_ref().expect("table built at construction");
                let u: f64 = rng.random::<f64>() * cumulative.last().unwrap();
                let idx = cumulative.partition_point(|&c| c < u).min(snaps.len() - 1);
                (None, snaps[idx].clone())
            }
            SamplerMode::ThetaMultinomial => {
                let theta = self.draw_theta(&mut rng);
                let masses = self.kernel.diagonal_masses(theta);
                (Some(theta), multinomial_draw(&mut rng, n, &masses))
            }
            SamplerMode::ThetaPoisson => {
                let theta = self.draw_theta(&mut rng);
                let masses = self.kernel.diagonal_masses(theta);
                (Some(theta), conditioned_poisson_draw(&mut rng, n, &masses)?)
            }
        };
        debug_assert_eq!(snapshot.total(), n);
        Ok(ShotRecord {
            shot_index,
            hidden_theta,
            snapshot,
            rng_stream_id: stream_id,
        })
    }

    fn draw_theta(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.config.pin_theta {
            Some(theta) => theta,
            None => rng.random::<f64>() * TWO_PI,
        }
    }
}

/// Single-shot convenience wrapper.
pub fn sample_shot(
    state: &TwoCloudState,
    bins: &BinGrid,
    config: &SamplerConfig,
    shot_index: u64,
) -> Result<ShotRecord> {
    SnapshotSampler::new(state, bins, *config)?.sample(shot_index)
}

/// Generates shots `0 .. config.shots`. Shots are independent streams, so the
/// parallel assembly is ordered by index and bit-identical to a serial run.
pub fn sample_batch(
    state: &TwoCloudState,
    bins: &BinGrid,
    config: &SamplerConfig,
) -> Result<Vec<ShotRecord>> {
    let sampler = SnapshotSampler::new(state, bins, *config)?;
    (0..config.shots)
        .into_par_iter()
        .map(|i| sampler.sample(i))
        .collect()
}

fn multinomial_draw(rng: &mut ChaCha8Rng, total: u64, masses: &[f64]) -> Snapshot {
    let mut counts = vec![0u64; masses.len()];
    let mut remaining = total;
    let mut rest: f64 = masses.iter().sum();
    for k in 0..masses.len() - 1 {
        if remaining == 0 {
            break;
        }
        if rest <= f64::MIN_POSITIVE {
            break;
        }
        let p = (masses[k] / rest).clamp(0.0, 1.0);
        let draw = if p >= 1.0 {
            remaining
        } else if p <= 0.0 {
            0
        } else {
            Binomial::new(remaining, p)
                .expect("validated binomial parameters")
                .sample(rng)
        };
        counts[k] = draw;
        remaining -= draw;
        rest -= masses[k];
    }
    *counts.last_mut().unwrap() += remaining;
    Snapshot::new(counts)
}

fn conditioned_poisson_draw(rng: &mut ChaCha8Rng, total: u64, masses: &[f64]) -> Result<Snapshot> {
    let mut proposal = vec![0u64; masses.len()];
    for _ in 0..REJECTION_LIMIT {
        let mut sum = 0u64;
        for (k, &mass) in masses.iter().enumerate() {
            let draw = if mass > 1e-300 {
                Poisson::new(mass)
                    .expect("positive Poisson rate")
                    .sample(rng) as u64
            } else {
                0
            };
            proposal[k] = draw;
            sum += draw;
        }
        if sum == total {
            return Ok(Snapshot::new(proposal));
        }
    }
    Err(Error::RejectionLimitExceeded {
        limit: REJECTION_LIMIT,
    })
}

/// Per-bin average counts of a batch.
pub fn empirical_mean_profile(records: &[ShotRecord]) -> Result<BinnedDensity> {
    let first = records.first().ok_or(Error::EmptyInput {
        what: "shot records",
    })?;
    let bins = first.snapshot.len();
    let mut acc = vec![0.0; bins];
    for record in records {
        for (slot, &count) in acc.iter_mut().zip(record.snapshot.counts()) {
            *slot += count as f64;
        }
    }
    for slot in &mut acc {
        *slot /= records.len() as f64;
    }
    Ok(BinnedDensity::new(acc))
}

/// Marks the bins of the overlap region: incoherent mass at least `fraction`
/// of the largest bin mass.
pub fn overlap_support_mask(kernel: &OverlapKernel, fraction: f64) -> Vec<bool> {
    let masses = kernel.incoherent_masses();
    let max = masses.iter().cloned().fold(0.0f64, f64::max);
    masses.iter().map(|&m| m >= fraction * max).collect()
}

/// `(max - min) / (max + min)` of the counts over the masked bins.
pub fn fringe_contrast(counts: &[u64], mask: &[bool]) -> f64 {
    let mut lo = u64::MAX;
    let mut hi = 0u64;
    for (&c, &keep) in counts.iter().zip(mask) {
        if keep {
            lo = lo.min(c);
            hi = hi.max(c);
        }
    }
    if hi == 0 || lo == u64::MAX {
        return 0.0;
    }
    (hi - lo) as f64 / (hi + lo) as f64
}

/// Locates the dominant spatial frequency of a residual profile sampled at
/// equally spaced bin centres. Parabolic interpolation of the spectral peak
/// gives sub-bin resolution.
pub fn detect_fringe_wavevector(residuals: &[f64], bin_width: f64) -> f64 {
    let k = residuals.len();
    let length = k as f64 * bin_width;
    let magnitude = |j: usize| -> f64 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (i, &r) in residuals.iter().enumerate() {
            let phase = TWO_PI * j as f64 * i as f64 / k as f64;
            re += r * phase.cos();
            im -= r * phase.sin();
        }
        (re * re + im * im).sqrt()
    };
    let mut best_j = 1;
    let mut best_m = 0.0;
    for j in 1..=k / 2 {
        let m = magnitude(j);
        if m > best_m {
            best_m = m;
            best_j = j;
        }
    }
    let mut refined = best_j as f64;
    if best_j > 1 && best_j < k / 2 {
        let (ml, mc, mr) = (
            magnitude(best_j - 1),
            best_m,
            magnitude(best_j + 1),
        );
        let denom = ml - 2.0 * mc + mr;
        if denom.abs() > 1e-300 {
            refined += 0.5 * (ml - mr) / denom;
        }
    }
    TWO_PI * refined / length
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::physics::CloudSpec;
    use crate::stats::chi_square_gof;

    fn spec(d: f64, tau: f64, n: u64) -> CloudSpec {
        CloudSpec {
            initial_width: 1.0,
            center_offset: d,
            expansion_time: tau,
            particles: n,
            mass: 1.0,
            hbar: 1.0,
        }
    }

    fn default_state(n_each: u64, grid: &Grid) -> TwoCloudState {
        TwoCloudState::gaussian(&spec(3.0, 10.0, n_each), &spec(3.0, 10.0, n_each), grid).unwrap()
    }

    #[test]
    fn single_bin_always_collects_everything() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(25, &grid);
        let bins = BinGrid::equal_bins(&grid, 1).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ThetaMultinomial,
            shots: 16,
            seed: 3,
            pin_theta: None,
        };
        for record in sample_batch(&state, &bins, &config).unwrap() {
            assert_eq!(record.snapshot.counts(), &[50]);
        }
    }

    #[test]
    fn disjoint_clouds_never_mix_counts() {
        // The exact distribution fixes the per-cloud totals when the clouds
        // do not overlap, so every enumerated draw splits as (N1, N2).
        let grid = Grid::new(-30.0, 30.0, 3001).unwrap();
        let state =
            TwoCloudState::gaussian(&spec(6.0, 0.0, 2), &spec(6.0, 0.0, 1), &grid).unwrap();
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ExactEnumeration,
            shots: 64,
            seed: 9,
            pin_theta: None,
        };
        for record in sample_batch(&state, &bins, &config).unwrap() {
            assert_eq!(record.snapshot.counts(), &[2, 1], "cloud split leaked");
        }
    }

    #[test]
    fn batch_is_reproducible_and_seed_sensitive() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(100, &grid);
        let bins = BinGrid::equal_bins(&grid, 8).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ThetaMultinomial,
            shots: 32,
            seed: 42,
            pin_theta: None,
        };
        let a = sample_batch(&state, &bins, &config).unwrap();
        let b = sample_batch(&state, &bins, &config).unwrap();
        assert_eq!(a, b);

        // serial assembly gives the same records as the parallel batch
        let sampler = SnapshotSampler::new(&state, &bins, config).unwrap();
        let serial: Vec<ShotRecord> = (0..config.shots).map(|i| sampler.sample(i).unwrap()).collect();
        assert_eq!(a, serial);

        let shifted = SamplerConfig { seed: 43, ..config };
        let c = sample_batch(&state, &bins, &shifted).unwrap();
        let thetas_a: Vec<f64> = a.iter().filter_map(|r| r.hidden_theta).collect();
        let thetas_c: Vec<f64> = c.iter().filter_map(|r| r.hidden_theta).collect();
        assert_ne!(thetas_a, thetas_c);
    }

    #[test]
    fn conditioned_poisson_preserves_the_total() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(50, &grid);
        let bins = BinGrid::equal_bins(&grid, 8).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ThetaPoisson,
            shots: 200,
            seed: 5,
            pin_theta: None,
        };
        for record in sample_batch(&state, &bins, &config).unwrap() {
            assert_eq!(record.snapshot.total(), 100);
        }
    }

    #[test]
    fn pinned_phase_is_recorded_and_constant() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(30, &grid);
        let bins = BinGrid::equal_bins(&grid, 4).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ThetaMultinomial,
            shots: 8,
            seed: 1,
            pin_theta: Some(1.25),
        };
        for record in sample_batch(&state, &bins, &config).unwrap() {
            assert_eq!(record.hidden_theta, Some(1.25));
        }
    }

    #[test]
    fn enumeration_sampler_matches_exact_distribution() {
        let grid = Grid::new(-40.0, 40.0, 4096).unwrap();
        let state = default_state(1, &grid);
        let bins = BinGrid::equal_bins(&grid, 3).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ExactEnumeration,
            shots: 100_000,
            seed: 2024,
            pin_theta: None,
        };
        let records = sample_batch(&state, &bins, &config).unwrap();
        let snaps = enumerate_snapshots(2, 3);
        let probs =
            exact_probabilities(&state, &bins, &snaps, &QuadratureSpec::for_state(&state)).unwrap();
        let mut observed = vec![0u64; snaps.len()];
        for record in &records {
            assert!(record.hidden_theta.is_none());
            let idx = snaps.iter().position(|s| *s == record.snapshot).unwrap();
            observed[idx] += 1;
        }
        let (stat, p) = chi_square_gof(&observed, &probs);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}, observed {observed:?}");
    }

    #[test]
    fn enumeration_domain_guard() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(30, &grid);
        let bins = BinGrid::equal_bins(&grid, 4).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ExactEnumeration,
            shots: 1,
            seed: 0,
            pin_theta: None,
        };
        assert!(matches!(
            SnapshotSampler::new(&state, &bins, config),
            Err(Error::EnumerationDomainExceeded { .. })
        ));
    }

    #[test]
    fn mean_profile_basics() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(200, &grid);
        let bins = BinGrid::equal_bins(&grid, 16).unwrap();
        let config = SamplerConfig {
            mode: SamplerMode::ThetaMultinomial,
            shots: 4000,
            seed: 77,
            pin_theta: None,
        };
        let records = sample_batch(&state, &bins, &config).unwrap();
        let single = empirical_mean_profile(&records[..1]).unwrap();
        assert_eq!(
            single.masses(),
            records[0]
                .snapshot
                .counts()
                .iter()
                .map(|&c| c as f64)
                .collect::<Vec<_>>()
                .as_slice()
        );
        // two half batches agree within loose statistical error
        let first = empirical_mean_profile(&records[..2000]).unwrap();
        let second = empirical_mean_profile(&records[2000..]).unwrap();
        for (a, b) in first.masses().iter().zip(second.masses()) {
            let scale = (a + b).max(4.0);
            assert!(
                (a - b).abs() < 6.0 * scale.sqrt(),
                "half-batch means differ: {a} vs {b}"
            );
        }
        assert!(matches!(
            empirical_mean_profile(&[]),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn wavevector_detector_recovers_synthetic_frequency() {
        let k = 64;
        let width = 1.25;
        let target = 0.594;
        let residuals: Vec<f64> = (0..k)
            .map(|i| {
                let x = (i as f64 + 0.5) * width;
                (target * x + 0.7).cos() * (-((x - 40.0) / 18.0).powi(2)).exp()
            })
            .collect();
        let detected = detect_fringe_wavevector(&residuals, width);
        assert!(
            (detected - target).abs() / target < 0.05,
            "detected {detected}"
        );
    }
}
