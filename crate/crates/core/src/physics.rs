//! Single-particle modes of the two clouds and the phase-dependent density.
//!
//! Each cloud starts in the Gaussian ground state of a harmonic trap centred
//! at `-d` (cloud 1) or `+d` (cloud 2) and expands freely for a time `tau`.
//! The evolved packet keeps the closed form
//!
//! ```text
//! phi(x) = sqrt(N / (a_tau sqrt(pi))) exp(-(x +- d)^2 / (2 a a_tau)),
//! a_tau  = a + i hbar tau / (m a),
//! ```
//!
//! normalised so that the integral of |phi|^2 equals the particle number of
//! the cloud. All operations here are pure functions over immutable values.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Relative tolerance on the trapezoid norm of a mode.
pub const NORM_TOL: f64 = 1e-6;

/// Default ceiling on |<phi1|phi2>| / sqrt(N1 N2) when building a state.
pub const ORTHOGONALITY_TOL: f64 = 1e-3;

/// Physical parameters of one cloud before and during free expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudSpec {
    /// Initial Gaussian width `a` of the trap ground state.
    pub initial_width: f64,
    /// Trap centre distance `d` from the origin; cloud 1 sits at `-d`, cloud 2 at `+d`.
    pub center_offset: f64,
    /// Free expansion time `tau`.
    pub expansion_time: f64,
    /// Number of condensed particles in this cloud.
    pub particles: u64,
    /// Particle mass.
    pub mass: f64,
    /// Reduced Planck constant; keep 1.0 for the dimensionless unit system.
    pub hbar: f64,
}

impl CloudSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("initial_width", self.initial_width),
            ("mass", self.mass),
            ("hbar", self.hbar),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositiveParameter { name, value });
            }
        }
        if self.expansion_time < 0.0 || !self.expansion_time.is_finite() {
            return Err(Error::NonPositiveParameter {
                name: "expansion_time",
                value: self.expansion_time,
            });
        }
        if self.particles < 1 {
            return Err(Error::NonPositiveParameter {
                name: "particles",
                value: self.particles as f64,
            });
        }
        if !self.center_offset.is_finite() {
            return Err(Error::NonPositiveParameter {
                name: "center_offset",
                value: self.center_offset,
            });
        }
        Ok(())
    }

    /// Complex effective width `a + i hbar tau / (m a)` after expansion.
    pub fn dispersed_width(&self) -> Complex64 {
        Complex64::new(
            self.initial_width,
            self.hbar * self.expansion_time / (self.mass * self.initial_width),
        )
    }
}

/// Which side of the origin the packet occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudPosition {
    /// Packet centred at `-d` (cloud 1); the `+` sign in `(x + d)^2`.
    Left,
    /// Packet centred at `+d` (cloud 2); the `-` sign in `(x - d)^2`.
    Right,
}

/// A sampled complex single-particle wave function on a uniform lattice,
/// normalised to the particle number of its cloud.
#[derive(Debug, Clone)]
pub struct Mode {
    grid: Grid,
    values: Vec<Complex64>,
    particles: u64,
}

impl Mode {
    /// Wraps raw amplitudes, enforcing the norm invariant
    /// `integral |phi|^2 = particles` within [`NORM_TOL`] relative.
    pub fn new(grid: Grid, values: Vec<Complex64>, particles: u64) -> Result<Self> {
        assert_eq!(values.len(), grid.len(), "value count must match the grid");
        let mode = Self {
            grid,
            values,
            particles,
        };
        let norm = mode.norm();
        let expected = particles as f64;
        let deviation = (norm - expected).abs() / expected;
        if deviation > NORM_TOL {
            return Err(Error::GridTooSmall {
                expected,
                deviation,
                tolerance: NORM_TOL,
            });
        }
        Ok(mode)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn particles(&self) -> u64 {
        self.particles
    }

    /// Trapezoid norm `integral |phi|^2 dx`.
    pub fn norm(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v.norm_sqr()).collect();
        self.grid.trapezoid_real(&sq)
    }
}

/// Builds the freely expanded Gaussian packet of one cloud on `grid`.
///
/// The complex phase structure follows the closed form exactly; no global
/// phase or renormalisation is applied. Fails when the grid truncates the
/// packet so strongly that the norm drifts beyond [`NORM_TOL`].
pub fn make_gaussian_mode(spec: &CloudSpec, position: CloudPosition, grid: &Grid) -> Result<Mode> {
    spec.validate()?;
    let a = spec.initial_width;
    let a_tau = spec.dispersed_width();
    let amplitude = (Complex64::new(spec.particles as f64, 0.0)
        / (a_tau * std::f64::consts::PI.sqrt()))
    .sqrt();
    let center = match position {
        CloudPosition::Left => -spec.center_offset,
        CloudPosition::Right => spec.center_offset,
    };
    let inv_two_a_atau = (2.0 * a * a_tau).inv();
    let values: Vec<Complex64> = grid
        .positions()
        .map(|x| {
            let dx = x - center;
            amplitude * (-(dx * dx) * inv_two_a_atau).exp()
        })
        .collect();
    Mode::new(grid.clone(), values, spec.particles)
}

/// Trapezoid approximation of `integral phi1^* phi2 dx`.
pub fn mode_overlap(m1: &Mode, m2: &Mode) -> Result<Complex64> {
    if m1.grid() != m2.grid() {
        return Err(Error::GridMismatch);
    }
    let prod: Vec<Complex64> = m1
        .values()
        .iter()
        .zip(m2.values())
        .map(|(u, v)| u.conj() * v)
        .collect();
    Ok(m1.grid().trapezoid_complex(&prod))
}

/// The full pre-measurement many-body state: two Fock clouds on one lattice.
#[derive(Debug, Clone)]
pub struct TwoCloudState {
    mode1: Mode,
    mode2: Mode,
    overlap: Complex64,
}

impl TwoCloudState {
    pub fn new(mode1: Mode, mode2: Mode) -> Result<Self> {
        Self::with_orthogonality_tol(mode1, mode2, ORTHOGONALITY_TOL)
    }

    /// Construction fails when the normalised mode overlap exceeds `tol`;
    /// the measured overlap stays available as a warning value.
    pub fn with_orthogonality_tol(mode1: Mode, mode2: Mode, tol: f64) -> Result<Self> {
        let overlap = mode_overlap(&mode1, &mode2)?;
        let scale = ((mode1.particles() * mode2.particles()) as f64).sqrt();
        let normalized = overlap.norm() / scale;
        if normalized > tol {
            return Err(Error::NonOrthogonalModes {
                overlap: normalized,
                tolerance: tol,
            });
        }
        Ok(Self {
            mode1,
            mode2,
            overlap,
        })
    }

    /// Convenience constructor: both clouds from their specs on a shared grid.
    pub fn gaussian(spec1: &CloudSpec, spec2: &CloudSpec, grid: &Grid) -> Result<Self> {
        let mode1 = make_gaussian_mode(spec1, CloudPosition::Left, grid)?;
        let mode2 = make_gaussian_mode(spec2, CloudPosition::Right, grid)?;
        Self::new(mode1, mode2)
    }

    pub fn mode1(&self) -> &Mode {
        &self.mode1
    }

    pub fn mode2(&self) -> &Mode {
        &self.mode2
    }

    pub fn grid(&self) -> &Grid {
        self.mode1.grid()
    }

    pub fn n1(&self) -> u64 {
        self.mode1.particles()
    }

    pub fn n2(&self) -> u64 {
        self.mode2.particles()
    }

    pub fn total(&self) -> u64 {
        self.n1() + self.n2()
    }

    /// Population fractions `(N1/N, N2/N)`; the pair sums to one as rationals.
    pub fn population_fractions(&self) -> (f64, f64) {
        let n = self.total() as f64;
        (self.n1() as f64 / n, self.n2() as f64 / n)
    }

    /// Recorded `<phi1|phi2>` of the accepted, nearly orthogonal pair.
    pub fn overlap(&self) -> Complex64 {
        self.overlap
    }

    /// State with the clouds exchanged; every probability must be invariant.
    pub fn swapped(&self) -> Self {
        Self {
            mode1: self.mode2.clone(),
            mode2: self.mode1.clone(),
            overlap: self.overlap.conj(),
        }
    }
}

/// A real non-negative particle density sampled on the mode lattice.
#[derive(Debug, Clone)]
pub struct DensityProfile {
    grid: Grid,
    values: Vec<f64>,
}

impl DensityProfile {
    pub(crate) fn from_values(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn integral(&self) -> f64 {
        self.grid.trapezoid_real(&self.values)
    }
}

/// Pointwise density `|e^{i theta} phi1 + phi2|^2` of the phase-locked
/// superposition; `theta` is reduced mod 2 pi before use.
pub fn rho_theta(state: &TwoCloudState, theta: f64) -> DensityProfile {
    let theta = theta.rem_euclid(2.0 * std::f64::consts::PI);
    let phase = Complex64::from_polar(1.0, theta);
    let values: Vec<f64> = state
        .mode1
        .values()
        .iter()
        .zip(state.mode2.values())
        .map(|(p1, p2)| (phase * p1 + p2).norm_sqr())
        .collect();
    DensityProfile::from_values(state.grid().clone(), values)
}
