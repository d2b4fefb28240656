//! Uniform position lattice and trapezoid quadrature.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A uniform lattice of `points` positions spanning `[x_min, x_max]` inclusive.
///
/// Two grids are "identical" when their defining fields compare equal bit for
/// bit; modes combined in one state must share the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    x_min: f64,
    x_max: f64,
    points: usize,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, points: usize) -> Result<Self> {
        if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::NonPositiveParameter {
                name: "grid extent",
                value: x_max - x_min,
            });
        }
        if points < 2 {
            return Err(Error::NonPositiveParameter {
                name: "grid points",
                value: points as f64 - 2.0,
            });
        }
        Ok(Self {
            x_min,
            x_max,
            points,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lattice spacing h.
    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.points - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + self.spacing() * i as f64
    }

    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.points).map(move |i| self.x(i))
    }

    /// Index of the lattice point at `x`, or an error if `x` lies off lattice.
    pub fn index_of(&self, x: f64) -> Result<usize> {
        let h = self.spacing();
        let raw = (x - self.x_min) / h;
        let i = raw.round();
        if i < 0.0 || i as usize >= self.points || (raw - i).abs() > 1e-6 {
            return Err(Error::PointOffLattice { x });
        }
        Ok(i as usize)
    }

    /// Composite trapezoid rule over the full lattice.
    pub fn trapezoid_real(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.points);
        let h = self.spacing();
        let interior: f64 = values[1..values.len() - 1].iter().sum();
        h * (0.5 * (values[0] + values[values.len() - 1]) + interior)
    }

    pub fn trapezoid_complex(&self, values: &[Complex64]) -> Complex64 {
        debug_assert_eq!(values.len(), self.points);
        let h = self.spacing();
        let mut acc = 0.5 * (values[0] + values[values.len() - 1]);
        for v in &values[1..values.len() - 1] {
            acc += *v;
        }
        acc * h
    }
}
