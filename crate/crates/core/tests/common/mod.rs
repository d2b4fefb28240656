//! Shared fixtures for the integration suites.

use fringe_fcs::grid::Grid;
use fringe_fcs::physics::{CloudSpec, TwoCloudState};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Default-scenario cloud: a = 1, d = 3, tau = 10, dimensionless units.
pub fn cloud(particles: u64) -> CloudSpec {
    CloudSpec {
        initial_width: 1.0,
        center_offset: 3.0,
        expansion_time: 10.0,
        particles,
        mass: 1.0,
        hbar: 1.0,
    }
}

/// Default simulation domain with an even cell count.
pub fn default_grid() -> Grid {
    Grid::new(-40.0, 40.0, 4097).unwrap()
}

/// Default-scenario state with the given per-cloud particle numbers.
pub fn state(n1: u64, n2: u64, grid: &Grid) -> TwoCloudState {
    TwoCloudState::gaussian(&cloud(n1), &cloud(n2), grid).unwrap()
}

/// Fringe wavevector of the default scenario, `2 d b / (a |a_tau|^2)`
/// with `b = hbar tau / (m a)`.
pub fn default_wavevector() -> f64 {
    60.0 / 101.0
}
