//! Phase assignment, Fisher information, estimator calibration, the
//! phase distribution of repeated runs, and the fixed-phase entropy.
//!
//! The default estimator follows the least-squares assignment: the fitted
//! phase minimises the Euclidean distance between the observed counts and
//! the binned fixed-phase density. A multinomial maximum-likelihood variant
//! is available behind [`Objective::MaxLikelihood`] for saturation studies.
//!
//! All phase comparisons are circular: means, spreads and distances wrap at
//! `2 pi`, which is the testable form of unbiasedness at the seam.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::binning::{BinGrid, Snapshot};
use crate::error::{Error, Result};
use crate::fcs::OverlapKernel;
use crate::physics::{CloudSpec, TwoCloudState};
use crate::sampling::{sample_batch, SamplerConfig, SamplerMode};
use crate::stats;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Coarse scan resolution of the phase search.
const SCAN_POINTS: usize = 256;
/// Golden-section refinement stops below this phase width.
const REFINE_TOL: f64 = 1e-6;
/// Relative spread under which the objective counts as constant.
const DEGENERATE_TOL: f64 = 1e-12;
/// Fisher integrals below this floor carry no phase information.
const INFORMATION_FLOOR: f64 = 1e-30;
/// Circular bins of a calibration histogram.
pub const CALIBRATION_BINS: usize = 64;
/// Circular bins of the phase-distribution histogram.
pub const PHASE_HIST_BINS: usize = 16;
/// Minimum shot count for a uniformity verdict.
pub const UNIFORMITY_MIN_SHOTS: u64 = 1000;

/// A fitted phase with its residual and Cramer-Rao confidence width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseEstimate {
    /// Global minimiser of the objective, in `[0, 2 pi)`.
    pub theta_hat: f64,
    /// Value of the minimised objective.
    pub residual: f64,
    /// Cramer-Rao width at the fitted phase.
    pub sigma_cr: f64,
}

/// Which objective the phase fit minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Euclidean distance between counts and the binned density (default).
    #[default]
    LeastSquares,
    /// Negative multinomial log-likelihood; not part of the reference
    /// procedure, kept for the bound-saturation study.
    MaxLikelihood,
}

/// Reusable fitter bound to one state and mesh.
pub struct PhaseFitter<'a> {
    state: &'a TwoCloudState,
    kernel: OverlapKernel,
    objective: Objective,
}

impl<'a> PhaseFitter<'a> {
    pub fn new(state: &'a TwoCloudState, bins: &BinGrid) -> Result<Self> {
        Self::with_objective(state, bins, Objective::LeastSquares)
    }

    pub fn with_objective(
        state: &'a TwoCloudState,
        bins: &BinGrid,
        objective: Objective,
    ) -> Result<Self> {
        Ok(Self {
            state,
            kernel: OverlapKernel::new(state, bins)?,
            objective,
        })
    }

    pub fn fit(&self, snapshot: &Snapshot) -> Result<PhaseEstimate> {
        if snapshot.len() != self.kernel.bins() {
            return Err(Error::SnapshotShape {
                bins: snapshot.len(),
                expected: self.kernel.bins(),
            });
        }
        if snapshot.total() != self.kernel.total() {
            return Err(Error::WrongTotal {
                expected: self.kernel.total(),
                got: snapshot.total(),
            });
        }
        let counts: Vec<f64> = snapshot.counts().iter().map(|&c| c as f64).collect();
        let objective = |theta: f64| -> f64 {
            let masses = self.kernel.diagonal_masses(theta);
            match self.objective {
                Objective::LeastSquares => counts
                    .iter()
                    .zip(&masses)
                    .map(|(n, m)| (n - m) * (n - m))
                    .sum(),
                Objective::MaxLikelihood => {
                    let total: f64 = masses.iter().sum();
                    let mut nll = 0.0;
                    for (n, m) in counts.iter().zip(&masses) {
                        if *n == 0.0 {
                            continue;
                        }
                        if *m <= 0.0 {
                            return f64::INFINITY;
                        }
                        nll -= n * (m / total).ln();
                    }
                    nll
                }
            }
        };
        let (theta_hat, residual) = minimize_circular_objective(objective)?;
        let sigma_cr = fisher_sigma(self.state, theta_hat)?;
        Ok(PhaseEstimate {
            theta_hat,
            residual,
            sigma_cr,
        })
    }
}

/// Least-squares phase assignment for a single snapshot.
pub fn fit_phase(
    snapshot: &Snapshot,
    state: &TwoCloudState,
    bins: &BinGrid,
) -> Result<PhaseEstimate> {
    PhaseFitter::new(state, bins)?.fit(snapshot)
}

/// Global minimiser of a `2 pi`-periodic objective: coarse scan at
/// [`SCAN_POINTS`] equispaced phases (ties keep the smallest phase), then
/// golden-section refinement of the winning bracket.
pub fn minimize_circular_objective<F: Fn(f64) -> f64>(objective: F) -> Result<(f64, f64)> {
    let step = TWO_PI / SCAN_POINTS as f64;
    let mut best_idx = 0usize;
    let mut best = f64::INFINITY;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..SCAN_POINTS {
        let value = objective(i as f64 * step);
        if value.is_finite() {
            lo = lo.min(value);
            hi = hi.max(value);
        }
        if value < best {
            best = value;
            best_idx = i;
        }
    }
    if !(hi - lo).is_finite() || hi - lo <= DEGENERATE_TOL * hi.abs().max(1.0) {
        return Err(Error::DegenerateObjective);
    }
    // golden-section refinement around the winning scan node
    let mut a = best_idx as f64 * step - step;
    let mut b = best_idx as f64 * step + step;
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while b - a > REFINE_TOL {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = objective(x2);
        }
    }
    let theta = (0.5 * (a + b)).rem_euclid(TWO_PI);
    Ok((theta, objective(theta)))
}

// ---------------------------------------------------------------------------
// Fisher information
// ---------------------------------------------------------------------------

/// Cramer-Rao phase width from the density-derivative form of the Fisher
/// information:
///
/// ```text
/// sigma^-2 = int rho_t (d ln rho_t / dt)^2 dx ,
/// d rho_t / dt = -2 Im(e^{i t} phi1 conj(phi2)).
/// ```
pub fn fisher_sigma(state: &TwoCloudState, theta: f64) -> Result<f64> {
    fisher_from_integrand(state, theta, |cross_rot, rho| {
        let d_rho = -2.0 * cross_rot.im;
        d_rho * d_rho / rho
    })
}

/// The same width computed from the mode products,
/// `sigma^-2 = 2 int (|phi1|^2 |phi2|^2 - Re((e^{i t} phi1 conj(phi2))^2)) / rho_t dx`.
///
/// `|z|^2 - Re(z^2) = 2 Im(z)^2` makes this algebraically identical to
/// [`fisher_sigma`]; the two routes must agree to machine precision.
pub fn fisher_sigma_mode_route(state: &TwoCloudState, theta: f64) -> Result<f64> {
    fisher_from_integrand(state, theta, |cross_rot, rho| {
        2.0 * (cross_rot.norm_sqr() - (cross_rot * cross_rot).re) / rho
    })
}

fn fisher_from_integrand(
    state: &TwoCloudState,
    theta: f64,
    term: impl Fn(Complex64, f64) -> f64,
) -> Result<f64> {
    let phase = Complex64::from_polar(1.0, theta.rem_euclid(TWO_PI));
    let integrand: Vec<f64> = state
        .mode1()
        .values()
        .iter()
        .zip(state.mode2().values())
        .map(|(p1, p2)| {
            let cross_rot = phase * (p1 * p2.conj());
            let rho = p1.norm_sqr() + p2.norm_sqr() + 2.0 * cross_rot.re;
            if rho <= 1e-300 {
                0.0
            } else {
                term(cross_rot, rho)
            }
        })
        .collect();
    let information = state.grid().trapezoid_real(&integrand);
    if information < INFORMATION_FLOOR {
        return Err(Error::ZeroInformation {
            floor: INFORMATION_FLOOR,
        });
    }
    Ok(1.0 / information.sqrt())
}

/// Order-of-magnitude phase uncertainty in the small-overlap regime,
/// `exp(d^2 / (2 a |a_tau|)) / (N1 N2)^{1/4}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticSigma {
    pub sigma: f64,
    /// Whether `|a_tau| < d^2 / a` actually holds; the estimate is returned
    /// either way, flagged when the regime assumption is violated.
    pub in_regime: bool,
}

/// Scaling estimate of the phase uncertainty from the cloud geometry alone.
pub fn asymptotic_sigma(spec1: &CloudSpec, spec2: &CloudSpec) -> Result<AsymptoticSigma> {
    spec1.validate()?;
    spec2.validate()?;
    let a = spec1.initial_width;
    let d = spec1.center_offset;
    let width = spec1.dispersed_width().norm();
    let product = (spec1.particles as f64) * (spec2.particles as f64);
    let sigma = (d * d / (2.0 * a * width)).exp() / product.powf(0.25);
    Ok(AsymptoticSigma {
        sigma,
        in_regime: width < d * d / a,
    })
}

// ---------------------------------------------------------------------------
// Calibration and the phase distribution
// ---------------------------------------------------------------------------

/// Empirical response of the estimator to a known phase.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub theta_true: f64,
    /// Histogram of the fitted phases over [`CALIBRATION_BINS`] circular bins.
    pub histogram: Vec<u64>,
    pub circular_mean: f64,
    pub circular_std: f64,
    /// The raw fitted phases, one per shot.
    pub estimates: Vec<f64>,
}

impl Calibration {
    pub fn shots(&self) -> usize {
        self.estimates.len()
    }
}

/// Samples `shots` snapshots at the pinned phase and fits each one.
pub fn calibrate(
    state: &TwoCloudState,
    bins: &BinGrid,
    theta_true: f64,
    shots: u64,
    seed: u64,
) -> Result<Calibration> {
    if shots < 100 {
        return Err(Error::InsufficientShots {
            required: 100,
            got: shots,
        });
    }
    let theta_true = theta_true.rem_euclid(TWO_PI);
    let config = SamplerConfig {
        mode: SamplerMode::ThetaMultinomial,
        shots,
        seed,
        pin_theta: Some(theta_true),
    };
    let records = sample_batch(state, bins, &config)?;
    let fitter = PhaseFitter::new(state, bins)?;
    let estimates: Vec<f64> = records
        .par_iter()
        .map(|record| fitter.fit(&record.snapshot).map(|e| e.theta_hat))
        .collect::<Result<_>>()?;
    Ok(Calibration {
        theta_true,
        histogram: stats::circular_histogram(&estimates, CALIBRATION_BINS),
        circular_mean: stats::circular_mean(&estimates),
        circular_std: stats::circular_std(&estimates),
        estimates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UniformityVerdict {
    Uniform,
    NonUniform,
    InsufficientData,
}

impl UniformityVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::NonUniform => "non-uniform",
            Self::InsufficientData => "insufficient-data",
        }
    }
}

/// Histogram of fitted phases over repeated runs with a chi-square
/// uniformity verdict.
#[derive(Debug, Clone)]
pub struct PhaseDistribution {
    pub histogram: Vec<u64>,
    pub chi_square: f64,
    pub p_value: f64,
    pub verdict: UniformityVerdict,
}

/// Distribution of the assigned phase over full-mixture runs (hidden phase
/// drawn uniformly per shot).
pub fn p_theta_distribution(
    state: &TwoCloudState,
    bins: &BinGrid,
    shots: u64,
    seed: u64,
) -> Result<PhaseDistribution> {
    phase_distribution(state, bins, shots, seed, None)
}

/// Diagnostic variant with an optionally pinned sampler phase; pinning must
/// concentrate the histogram and fail the uniformity test.
pub fn phase_distribution(
    state: &TwoCloudState,
    bins: &BinGrid,
    shots: u64,
    seed: u64,
    pin_theta: Option<f64>,
) -> Result<PhaseDistribution> {
    let config = SamplerConfig {
        mode: SamplerMode::ThetaMultinomial,
        shots,
        seed,
        pin_theta,
    };
    let records = sample_batch(state, bins, &config)?;
    let fitter = PhaseFitter::new(state, bins)?;
    let estimates: Vec<f64> = records
        .par_iter()
        .map(|record| fitter.fit(&record.snapshot).map(|e| e.theta_hat))
        .collect::<Result<_>>()?;
    let histogram = stats::circular_histogram(&estimates, PHASE_HIST_BINS);
    let (chi_square, p_value) = stats::chi_square_uniform(&histogram);
    let verdict = if shots < UNIFORMITY_MIN_SHOTS {
        UniformityVerdict::InsufficientData
    } else if p_value > 0.01 {
        UniformityVerdict::Uniform
    } else {
        UniformityVerdict::NonUniform
    };
    Ok(PhaseDistribution {
        histogram,
        chi_square,
        p_value,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// Entropy of the fixed-phase distribution
// ---------------------------------------------------------------------------

/// `S_t = - int rho_t ln rho_t dx`, with the additive constant fixed to
/// zero and points below `1e-30` excluded from the support.
pub fn partial_entropy(state: &TwoCloudState, theta: f64) -> f64 {
    let profile = crate::physics::rho_theta(state, theta);
    let integrand: Vec<f64> = profile
        .values()
        .iter()
        .map(|&rho| if rho > 1e-30 { -rho * rho.ln() } else { 0.0 })
        .collect();
    state.grid().trapezoid_real(&integrand)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::bin_density;
    use crate::grid::Grid;
    use crate::physics::rho_theta;

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
    fn noise_free_snapshot_recovers_the_phase() {
        let grid = Grid::new(-40.0, 40.0, 4097).unwrap();
        let state = default_state(5000, &grid);
        let bins = BinGrid::equal_bins(&grid, 64).unwrap();
        let theta0 = 1.0;
        let masses = bin_density(&rho_theta(&state, theta0), &bins).unwrap();
        // round to integer counts, fixing the total by adjusting the largest bin
        let mut counts: Vec<u64> = masses.masses().iter().map(|&m| m.round() as u64).collect();
        let largest = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap();
        let shortfall = state.total() as i64 - counts.iter().sum::<u64>() as i64;
        counts[largest] = (counts[largest] as i64 + shortfall) as u64;
        let estimate = fit_phase(&Snapshot::new(counts), &state, &bins).unwrap();
        assert!(
            stats::circular_distance(estimate.theta_hat, theta0) < 1e-3,
            "theta_hat = {}",
            estimate.theta_hat
        );
        assert!(estimate.sigma_cr > 0.0);
    }

    #[test]
    fn disjoint_clouds_are_degenerate() {
        let grid = Grid::new(-30.0, 30.0, 3001).unwrap();
        let state =
            TwoCloudState::gaussian(&spec(8.0, 0.0, 50), &spec(8.0, 0.0, 50), &grid).unwrap();
        let bins = BinGrid::equal_bins(&grid, 8).unwrap();
        let mut counts = vec![0u64; 8];
        counts[1] = 50;
        counts[6] = 50;
        let err = fit_phase(&Snapshot::new(counts), &state, &bins).unwrap_err();
        assert!(matches!(err, Error::DegenerateObjective));
    }

    #[test]
    fn objective_scaling_leaves_the_minimiser_unchanged() {
        let shape = |theta: f64| 1.5 + (theta - 2.2).cos() + 0.3 * (2.0 * theta).sin();
        let (base, _) = minimize_circular_objective(shape).unwrap();
        for scale in [4.0, 3.7, 1e-6] {
            let (scaled, _) = minimize_circular_objective(|t| scale * shape(t)).unwrap();
            assert_eq!(base, scaled, "scale {scale}");
        }
    }

    #[test]
    fn fisher_routes_agree_everywhere() {
        let grid = Grid::new(-40.0, 40.0, 4096).unwrap();
        let state = default_state(5000, &grid);
        for j in 0..16 {
            let theta = TWO_PI * j as f64 / 16.0;
            let a = fisher_sigma(&state, theta).unwrap();
            let b = fisher_sigma_mode_route(&state, theta).unwrap();
            assert!((a - b).abs() / a < 1e-10, "theta {theta}: {a} vs {b}");
        }
    }

    #[test]
    fn fisher_scaling_follows_the_quarter_power_law() {
        let grid = Grid::new(-40.0, 40.0, 4096).unwrap();
        let s100 = fisher_sigma(&default_state(100, &grid), 0.0).unwrap();
        let s200 = fisher_sigma(&default_state(200, &grid), 0.0).unwrap();
        let s400 = fisher_sigma(&default_state(400, &grid), 0.0).unwrap();
        assert!((s100 / s200 - 2f64.sqrt()).abs() < 1e-6);
        assert!((s100 / s400 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fisher_derivative_matches_finite_differences() {
        let grid = Grid::new(-40.0, 40.0, 4096).unwrap();
        let state = default_state(100, &grid);
        let theta = 0.8;
        let h = 1e-5;
        let plus = rho_theta(&state, theta + h);
        let minus = rho_theta(&state, theta - h);
        let phase = Complex64::from_polar(1.0, theta);
        for i in (0..grid.len()).step_by(257) {
            let numeric = (plus.values()[i] - minus.values()[i]) / (2.0 * h);
            let cross = state.mode1().values()[i] * state.mode2().values()[i].conj();
            let analytic = -2.0 * (phase * cross).im;
            assert!(
                (numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1.0),
                "grid point {i}: {numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn zero_information_flagged_for_separated_clouds() {
        let grid = Grid::new(-30.0, 30.0, 3001).unwrap();
        let state =
            TwoCloudState::gaussian(&spec(9.0, 0.0, 50), &spec(9.0, 0.0, 50), &grid).unwrap();
        assert!(matches!(
            fisher_sigma(&state, 0.3),
            Err(Error::ZeroInformation { .. })
        ));
    }

    #[test]
    fn asymptotic_sigma_algebra() {
        let base = spec(3.0, 10.0, 1000);
        let est = asymptotic_sigma(&base, &base).unwrap();
        let quadrupled = spec(3.0, 10.0, 4000);
        let est4 = asymptotic_sigma(&quadrupled, &quadrupled).unwrap();
        assert!((est.sigma / est4.sigma - 2.0).abs() < 1e-12);
        // log sigma is linear in d^2 with slope 1/(2 a |a_tau|)
        let slope_expected = 1.0 / (2.0 * 101f64.sqrt());
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for d in [2.0, 3.0, 4.0, 5.0] {
            let s = spec(d, 10.0, 1000);
            xs.push(d * d);
            ys.push(asymptotic_sigma(&s, &s).unwrap().sigma.ln());
        }
        let (slope, _) = stats::linear_fit(&xs, &ys);
        assert!((slope - slope_expected).abs() < 1e-12);
        // the default scenario violates the small-overlap regime and is flagged
        assert!(!est.in_regime);
        let tight = spec(8.0, 1.0, 1000);
        assert!(asymptotic_sigma(&tight, &tight).unwrap().in_regime);
    }

    #[test]
    fn calibration_guard_and_shape() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(500, &grid);
        let bins = BinGrid::equal_bins(&grid, 32).unwrap();
        assert!(matches!(
            calibrate(&state, &bins, 0.5, 10, 1),
            Err(Error::InsufficientShots { .. })
        ));
        let calib = calibrate(&state, &bins, 0.5, 128, 1).unwrap();
        assert_eq!(calib.shots(), 128);
        assert_eq!(calib.histogram.iter().sum::<u64>(), 128);
        assert!(stats::circular_distance(calib.circular_mean, 0.5) < 0.2);
    }

    #[test]
    fn phase_distribution_insufficient_data_verdict() {
        let grid = Grid::new(-40.0, 40.0, 2049).unwrap();
        let state = default_state(500, &grid);
        let bins = BinGrid::equal_bins(&grid, 32).unwrap();
        let result = p_theta_distribution(&state, &bins, 10, 3).unwrap();
        assert_eq!(result.verdict, UniformityVerdict::InsufficientData);
        assert_eq!(result.histogram.iter().sum::<u64>(), 10);
    }

    #[test]
    fn entropy_symmetries() {
        let grid = Grid::new(-40.0, 40.0, 4096).unwrap();
        let state = default_state(1000, &grid);
        let s_plus = partial_entropy(&state, 0.9);
        let s_minus = partial_entropy(&state, -0.9);
        assert!((s_plus - s_minus).abs() < 1e-10, "{s_plus} vs {s_minus}");
        let s_wrapped = partial_entropy(&state, 0.9 + TWO_PI);
        assert!((s_plus - s_wrapped).abs() < 1e-10);
    }
}
