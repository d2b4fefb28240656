//! Measurement mesh: bins aligned to the lattice, count strings, and
//! coarse-graining.
//!
//! Bin edges always coincide with lattice points, so binning a density is an
//! exact split of the global trapezoid sum: lattice points on an interior
//! edge contribute half their weight to each adjacent bin and total mass is
//! conserved bin-exactly.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::physics::DensityProfile;

/// A partition of the simulated domain into `K` contiguous bins (pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    grid: Grid,
    edge_idx: Vec<usize>,
}

impl BinGrid {
    /// Builds `k` bins of (as nearly as possible) equal width, with every
    /// edge on a lattice point and the bins covering the whole domain.
    pub fn equal_bins(grid: &Grid, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidBins {
                reason: "bin count must be at least 1".into(),
            });
        }
        let cells = grid.len() - 1;
        if k > cells {
            return Err(Error::InvalidBins {
                reason: format!("{k} bins do not fit on {cells} lattice cells"),
            });
        }
        let edge_idx: Vec<usize> = (0..=k)
            .map(|j| ((j as f64 / k as f64) * cells as f64).round() as usize)
            .collect();
        Self::from_edge_indices(grid.clone(), edge_idx)
    }

    /// Builds bins from explicit edge positions, which must each coincide
    /// with a lattice point and span the full domain.
    pub fn from_edge_positions(grid: &Grid, edges: &[f64]) -> Result<Self> {
        let mut edge_idx = Vec::with_capacity(edges.len());
        for &e in edges {
            let idx = grid
                .index_of(e)
                .map_err(|_| Error::MisalignedEdges { edge: e })?;
            edge_idx.push(idx);
        }
        Self::from_edge_indices(grid.clone(), edge_idx)
    }

    fn from_edge_indices(grid: Grid, edge_idx: Vec<usize>) -> Result<Self> {
        if edge_idx.len() < 2 {
            return Err(Error::InvalidBins {
                reason: "need at least two edges".into(),
            });
        }
        if edge_idx[0] != 0 || *edge_idx.last().unwrap() != grid.len() - 1 {
            return Err(Error::InvalidBins {
                reason: "bins must cover the whole domain".into(),
            });
        }
        if edge_idx.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidBins {
                reason: "edges must be strictly increasing".into(),
            });
        }
        Ok(Self { grid, edge_idx })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Number of bins K.
    pub fn len(&self) -> usize {
        self.edge_idx.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lattice index span `[lo, hi]` of bin `k`.
    pub fn span(&self, k: usize) -> (usize, usize) {
        (self.edge_idx[k], self.edge_idx[k + 1])
    }

    pub fn edge_positions(&self) -> Vec<f64> {
        self.edge_idx.iter().map(|&i| self.grid.x(i)).collect()
    }

    pub fn center(&self, k: usize) -> f64 {
        let (lo, hi) = self.span(k);
        0.5 * (self.grid.x(lo) + self.grid.x(hi))
    }

    pub fn width(&self, k: usize) -> f64 {
        let (lo, hi) = self.span(k);
        self.grid.x(hi) - self.grid.x(lo)
    }

    /// Trapezoid integral of lattice samples over each bin; interior edge
    /// points are split half-half between neighbours.
    pub fn integrate_real(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.grid.len());
        let h = self.grid.spacing();
        (0..self.len())
            .map(|k| {
                let (lo, hi) = self.span(k);
                let interior: f64 = values[lo + 1..hi].iter().sum();
                h * (0.5 * (values[lo] + values[hi]) + interior)
            })
            .collect()
    }

    pub fn integrate_complex(&self, values: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(values.len(), self.grid.len());
        let h = self.grid.spacing();
        (0..self.len())
            .map(|k| {
                let (lo, hi) = self.span(k);
                let mut acc = 0.5 * (values[lo] + values[hi]);
                for v in &values[lo + 1..hi] {
                    acc += *v;
                }
                acc * h
            })
            .collect()
    }

    /// Merges contiguous bin groups into a coarser BinGrid.
    pub fn coarsened(&self, merge_map: &[usize]) -> Result<Self> {
        validate_merge_map(merge_map, self.len())?;
        let groups = *merge_map.last().unwrap() + 1;
        let mut edge_idx = Vec::with_capacity(groups + 1);
        edge_idx.push(0);
        for k in 0..self.len() {
            if k + 1 == self.len() || merge_map[k + 1] != merge_map[k] {
                edge_idx.push(self.edge_idx[k + 1]);
            }
        }
        Self::from_edge_indices(self.grid.clone(), edge_idx)
    }
}

/// The outcome of one snapshot: integer particle counts per bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    counts: Vec<u64>,
}

impl Snapshot {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-bin masses of a coarse-grained density.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDensity {
    masses: Vec<f64>,
}

impl BinnedDensity {
    pub fn new(masses: Vec<f64>) -> Self {
        Self { masses }
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Coarse-grains a density profile onto the measurement mesh.
pub fn bin_density(profile: &DensityProfile, bins: &BinGrid) -> Result<BinnedDensity> {
    if profile.grid() != bins.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(BinnedDensity::new(bins.integrate_real(profile.values())))
}

/// Adds the observed particle content of bins within each contiguous group.
pub fn coarsen(snapshot: &Snapshot, merge_map: &[usize]) -> Result<Snapshot> {
    validate_merge_map(merge_map, snapshot.len())?;
    let groups = *merge_map.last().unwrap() + 1;
    let mut counts = vec![0u64; groups];
    for (k, &g) in merge_map.iter().enumerate() {
        counts[g] += snapshot.counts()[k];
    }
    Ok(Snapshot::new(counts))
}

fn validate_merge_map(merge_map: &[usize], bins: usize) -> Result<()> {
    if merge_map.len() != bins || merge_map.is_empty() {
        return Err(Error::NonContiguousGroups);
    }
    if merge_map[0] != 0 {
        return Err(Error::NonContiguousGroups);
    }
    for w in merge_map.windows(2) {
        if w[1] != w[0] && w[1] != w[0] + 1 {
            return Err(Error::NonContiguousGroups);
        }
    }
    Ok(())
}
