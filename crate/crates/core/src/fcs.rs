//! Exact counting statistics of the two-Fock-cloud state.
//!
//! The production path evaluates the closed form obtained by carrying out the
//! per-bin counting-phase integrals analytically,
//!
//! ```text
//! P{n} = (N1! N2! / (N1^N1 N2^N2)) <<  prod_k mu_k(t, t')^{n_k} / n_k!  >>
//! mu_k(t, t') = integral over bin k of conj(psi_t')(x) psi_t(x) dx
//! psi_t(x)    = e^{i nu2 t} phi1(x) + e^{-i nu1 t} phi2(x)
//! ```
//!
//! where `<< .. >>` is the average of the two relative-phase variables over
//! their enlarged `[0, 2 pi N]` range. On the physical shell
//! `sum n_k = N` every term of the integrand is a trigonometric polynomial
//! with *integer* frequencies in both variables (each factor contributes
//! `nu2 = N2/N` or `-nu1 = -N1/N`, and N factors always add up to an
//! integer), so the average over `[0, 2 pi N]` equals the average over one
//! `2 pi` period. The quadrature below exploits that reduction; composite
//! Gauss-Legendre panels on a single period then resolve the integrand to
//! machine accuracy at the default node budget.
//!
//! Two independent oracles guard the analytic reduction: direct integration
//! of `|Psi|^2` over the counting region ([`brute_force_probability`]) and a
//! discrete Fourier inversion of the generating function on a per-bin phase
//! lattice ([`lambda_lattice_probability`]).

use num_complex::Complex64;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::binning::{BinGrid, Snapshot};
use crate::error::{Error, Result};
use crate::physics::TwoCloudState;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Absolute tolerance of the node-doubling convergence check.
pub const CONVERGENCE_TOL: f64 = 1e-6;

/// Per-bin counting phases, one value in `[0, 2 pi)` per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaField {
    values: Vec<f64>,
}

impl LambdaField {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values: values.into_iter().map(|v| v.rem_euclid(TWO_PI)).collect(),
        }
    }

    pub fn zeros(bins: usize) -> Self {
        Self {
            values: vec![0.0; bins],
        }
    }

    pub fn constant(bins: usize, value: f64) -> Self {
        Self::new(vec![value; bins])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Node budget of the phase quadrature and of the per-bin phase lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureSpec {
    /// Nodes along the first phase variable (per full sweep).
    pub theta_nodes: usize,
    /// Nodes along the second phase variable.
    pub theta_prime_nodes: usize,
    /// Lattice size per bin dimension of the Fourier-inversion oracle.
    pub lambda_nodes: usize,
}

impl QuadratureSpec {
    /// Default budget for a state with `n` particles: `64 n` nodes per axis.
    pub fn for_particles(n: u64) -> Self {
        let nodes = 64 * (n as usize).max(1);
        Self {
            theta_nodes: nodes,
            theta_prime_nodes: nodes,
            lambda_nodes: 8,
        }
    }

    pub fn for_state(state: &TwoCloudState) -> Self {
        Self::for_particles(state.total())
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_nodes < 16 || self.theta_prime_nodes < 16 {
            return Err(Error::InvalidQuadrature {
                reason: format!(
                    "need at least 16 nodes per axis, got {} x {}",
                    self.theta_nodes, self.theta_prime_nodes
                ),
            });
        }
        if self.lambda_nodes < 2 {
            return Err(Error::InvalidQuadrature {
                reason: "lambda lattice needs at least 2 nodes".into(),
            });
        }
        Ok(())
    }

    fn doubled(&self) -> Self {
        Self {
            theta_nodes: self.theta_nodes * 2,
            theta_prime_nodes: self.theta_prime_nodes * 2,
            lambda_nodes: self.lambda_nodes,
        }
    }
}

// ---------------------------------------------------------------------------
// Gauss-Legendre panels
// ---------------------------------------------------------------------------

const PANEL_ORDER: usize = 16;

fn gauss_legendre_reference() -> &'static ([f64; PANEL_ORDER], [f64; PANEL_ORDER]) {
    use std::sync::OnceLock;
    static CACHE: OnceLock<([f64; PANEL_ORDER], [f64; PANEL_ORDER])> = OnceLock::new();
    CACHE.get_or_init(|| {
        let n = PANEL_ORDER;
        let mut nodes = [0.0; PANEL_ORDER];
        let mut weights = [0.0; PANEL_ORDER];
        for i in 0..n {
            // Newton iteration on the Legendre polynomial from the Chebyshev guess.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..64 {
                let (p, dp) = legendre_with_derivative(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(n, x);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Composite 16-point Gauss-Legendre rule over one `2 pi` period with at
/// least `min_nodes` nodes; weights sum to `2 pi`.
fn panel_rule(min_nodes: usize) -> Vec<(f64, f64)> {
    let panels = min_nodes.div_ceil(PANEL_ORDER).max(1);
    let (nodes, weights) = gauss_legendre_reference();
    let width = TWO_PI / panels as f64;
    let mut rule = Vec::with_capacity(panels * PANEL_ORDER);
    for p in 0..panels {
        let a = p as f64 * width;
        for i in 0..PANEL_ORDER {
            rule.push((a + 0.5 * width * (nodes[i] + 1.0), 0.5 * width * weights[i]));
        }
    }
    rule
}

// ---------------------------------------------------------------------------
// Overlap kernel
// ---------------------------------------------------------------------------

/// Per-bin overlap masses `mu_k(t, t')` of the phase-locked superpositions.
///
/// Only three bin integrals enter: `p_k = int |phi1|^2`, `q_k = int |phi2|^2`
/// and the complex cross mass `r_k = int phi1 conj(phi2)`. Everything else is
/// a phase factor, so evaluating the kernel at any phase pair costs O(K).
#[derive(Debug, Clone)]
pub struct OverlapKernel {
    p: Vec<f64>,
    q: Vec<f64>,
    r: Vec<Complex64>,
    nu1: f64,
    nu2: f64,
    n1: u64,
    n2: u64,
}

impl OverlapKernel {
    pub fn new(state: &TwoCloudState, bins: &BinGrid) -> Result<Self> {
        if state.grid() != bins.grid() {
            return Err(Error::GridMismatch);
        }
        let sq1: Vec<f64> = state.mode1().values().iter().map(|v| v.norm_sqr()).collect();
        let sq2: Vec<f64> = state.mode2().values().iter().map(|v| v.norm_sqr()).collect();
        let cross: Vec<Complex64> = state
            .mode1()
            .values()
            .iter()
            .zip(state.mode2().values())
            .map(|(a, b)| a * b.conj())
            .collect();
        let (nu1, nu2) = state.population_fractions();
        Ok(Self {
            p: bins.integrate_real(&sq1),
            q: bins.integrate_real(&sq2),
            r: bins.integrate_complex(&cross),
            nu1,
            nu2,
            n1: state.n1(),
            n2: state.n2(),
        })
    }

    pub fn bins(&self) -> usize {
        self.p.len()
    }

    pub fn n1(&self) -> u64 {
        self.n1
    }

    pub fn n2(&self) -> u64 {
        self.n2
    }

    pub fn total(&self) -> u64 {
        self.n1 + self.n2
    }

    /// Binned incoherent masses `int_bin (|phi1|^2 + |phi2|^2)`.
    pub fn incoherent_masses(&self) -> Vec<f64> {
        self.p.iter().zip(&self.q).map(|(a, b)| a + b).collect()
    }

    /// Binned complex cross masses `int_bin phi1 conj(phi2)`.
    pub fn cross_masses(&self) -> &[Complex64] {
        &self.r
    }

    /// `mu_k(t, t')` for every bin into `out`.
    pub fn mu_into(&self, theta: f64, theta_prime: f64, out: &mut [Complex64]) {
        let diff = theta - theta_prime;
        let e1 = Complex64::from_polar(1.0, self.nu2 * diff);
        let e2 = Complex64::from_polar(1.0, -self.nu1 * diff);
        let e3 = Complex64::from_polar(1.0, self.nu2 * theta + self.nu1 * theta_prime);
        let e4 = Complex64::from_polar(1.0, -(self.nu1 * theta + self.nu2 * theta_prime));
        for k in 0..self.p.len() {
            out[k] = e1 * self.p[k] + e2 * self.q[k] + e3 * self.r[k] + e4 * self.r[k].conj();
        }
    }

    /// Diagonal masses `mu_k(t, t)`: the binned density at phase difference `t`.
    pub fn diagonal_masses(&self, theta: f64) -> Vec<f64> {
        let phase = Complex64::from_polar(1.0, theta);
        self.p
            .iter()
            .zip(&self.q)
            .zip(&self.r)
            .map(|((p, q), r)| (p + q + 2.0 * (phase * r).re).max(0.0))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Shared numerics
// ---------------------------------------------------------------------------

fn cpow_u64(z: Complex64, mut n: u64) -> Complex64 {
    let mut base = z;
    let mut acc = Complex64::new(1.0, 0.0);
    while n > 0 {
        if n & 1 == 1 {
            acc *= base;
        }
        base *= base;
        n >>= 1;
    }
    acc
}

/// `ln(N1! N2! / (N1^N1 N2^N2))` of the Fock-projection prefactor.
fn ln_prefactor(n1: u64, n2: u64) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    ln_gamma(n1f + 1.0) + ln_gamma(n2f + 1.0) - n1f * n1f.ln() - n2f * n2f.ln()
}

fn ln_factorial_sum(counts: &[u64]) -> f64 {
    counts.iter().map(|&n| ln_gamma(n as f64 + 1.0)).sum()
}

/// Ordered two-panel reduction of a parallel sweep over the outer phase
/// nodes. Summation order is fixed by node index, independent of the worker
/// count.
fn sweep_ordered<T, F>(outer: &[(f64, f64)], eval: F) -> Vec<T>
where
    T: Send + Clone + std::ops::AddAssign,
    F: Fn(f64, f64) -> Vec<T> + Sync,
{
    let partials: Vec<Vec<T>> = outer
        .par_iter()
        .map(|&(theta, w)| eval(theta, w))
        .collect();
    let mut iter = partials.into_iter();
    let mut acc = iter.next().expect("quadrature rule must not be empty");
    for part in iter {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Generating function
// ---------------------------------------------------------------------------

/// Expectation of the phase-tagging operator on the two-cloud state:
/// `Phi(lambda) = < U_lambda >`. Returns 1 at `lambda = 0` and `e^{i c N}`
/// for a constant field `c`.
pub fn generating_function(
    state: &TwoCloudState,
    bins: &BinGrid,
    lambda: &LambdaField,
    quad: &QuadratureSpec,
) -> Result<Complex64> {
    quad.validate()?;
    let kernel = OverlapKernel::new(state, bins)?;
    if lambda.len() != kernel.bins() {
        return Err(Error::SnapshotShape {
            bins: lambda.len(),
            expected: kernel.bins(),
        });
    }
    let coarse = generating_function_sweep(&kernel, lambda, quad);
    let fine = generating_function_sweep(&kernel, lambda, &quad.doubled());
    let delta = (fine - coarse).norm();
    if delta > CONVERGENCE_TOL {
        return Err(Error::QuadratureNotConverged { delta });
    }
    Ok(fine)
}

fn generating_function_sweep(
    kernel: &OverlapKernel,
    lambda: &LambdaField,
    quad: &QuadratureSpec,
) -> Complex64 {
    let outer = panel_rule(quad.theta_nodes);
    let inner = panel_rule(quad.theta_prime_nodes);
    let tags: Vec<Complex64> = lambda
        .values()
        .iter()
        .map(|&l| Complex64::from_polar(1.0, l))
        .collect();
    let n = kernel.total();
    let k = kernel.bins();
    let sums = sweep_ordered(&outer, |theta, w_outer| {
        let mut mu = vec![Complex64::new(0.0, 0.0); k];
        let mut acc = Complex64::new(0.0, 0.0);
        for &(theta_prime, w_inner) in &inner {
            kernel.mu_into(theta, theta_prime, &mut mu);
            let mut z = Complex64::new(0.0, 0.0);
            for (t, m) in tags.iter().zip(&mu) {
                z += t * m;
            }
            acc += cpow_u64(z, n) * (w_outer * w_inner);
        }
        vec![acc]
    });
    let avg = sums[0] / (TWO_PI * TWO_PI);
    let scale = (ln_prefactor(kernel.n1(), kernel.n2()) - ln_gamma(n as f64 + 1.0)).exp();
    avg * scale
}

// ---------------------------------------------------------------------------
// Exact probability
// ---------------------------------------------------------------------------

/// Exact probability of one snapshot. Snapshots with the wrong total are
/// identically zero and short-circuit without quadrature.
pub fn exact_probability(
    state: &TwoCloudState,
    bins: &BinGrid,
    snapshot: &Snapshot,
    quad: &QuadratureSpec,
) -> Result<f64> {
    Ok(exact_probabilities(state, bins, std::slice::from_ref(snapshot), quad)?[0])
}

/// Batch variant sharing one phase sweep across many snapshots.
pub fn exact_probabilities(
    state: &TwoCloudState,
    bins: &BinGrid,
    snapshots: &[Snapshot],
    quad: &QuadratureSpec,
) -> Result<Vec<f64>> {
    quad.validate()?;
    let kernel = OverlapKernel::new(state, bins)?;
    for s in snapshots {
        if s.len() != kernel.bins() {
            return Err(Error::SnapshotShape {
                bins: s.len(),
                expected: kernel.bins(),
            });
        }
    }
    let live: Vec<usize> = (0..snapshots.len())
        .filter(|&i| snapshots[i].total() == kernel.total())
        .collect();
    let mut out = vec![0.0; snapshots.len()];
    if live.is_empty() {
        return Ok(out);
    }
    let live_snaps: Vec<&Snapshot> = live.iter().map(|&i| &snapshots[i]).collect();
    let coarse = exact_sweep(&kernel, &live_snaps, quad);
    let fine = exact_sweep(&kernel, &live_snaps, &quad.doubled());
    let delta = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if delta > CONVERGENCE_TOL {
        return Err(Error::QuadratureNotConverged { delta });
    }
    for (slot, value) in live.iter().zip(fine) {
        // tiny negative excursions are quadrature roundoff
        out[*slot] = value.max(0.0);
    }
    Ok(out)
}

fn exact_sweep(kernel: &OverlapKernel, snapshots: &[&Snapshot], quad: &QuadratureSpec) -> Vec<f64> {
    let outer = panel_rule(quad.theta_nodes);
    let inner = panel_rule(quad.theta_prime_nodes);
    let k = kernel.bins();
    let base = ln_prefactor(kernel.n1(), kernel.n2());
    let offsets: Vec<f64> = snapshots
        .iter()
        .map(|s| base - ln_factorial_sum(s.counts()))
        .collect();
    let sums: Vec<Complex64> = sweep_ordered(&outer, |theta, w_outer| {
        let mut mu = vec![Complex64::new(0.0, 0.0); k];
        let mut ln_mu = vec![Complex64::new(0.0, 0.0); k];
        let mut dead = vec![false; k];
        let mut acc = vec![Complex64::new(0.0, 0.0); snapshots.len()];
        for &(theta_prime, w_inner) in &inner {
            kernel.mu_into(theta, theta_prime, &mut mu);
            for j in 0..k {
                let m = mu[j];
                if m.norm_sqr() < f64::MIN_POSITIVE {
                    dead[j] = true;
                } else {
                    dead[j] = false;
                    ln_mu[j] = m.ln();
                }
            }
            let w = w_outer * w_inner;
            'snap: for (s, snapshot) in snapshots.iter().enumerate() {
                let mut ln_term = Complex64::new(offsets[s], 0.0);
                for (j, &n_k) in snapshot.counts().iter().enumerate() {
                    if n_k == 0 {
                        continue;
                    }
                    if dead[j] {
                        continue 'snap;
                    }
                    ln_term += ln_mu[j] * n_k as f64;
                }
                acc[s] += Complex64::from_polar(ln_term.re.exp(), ln_term.im) * w;
            }
        }
        acc
    });
    sums.iter().map(|z| z.re / (TWO_PI * TWO_PI)).collect()
}

// ---------------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------------

const BRUTE_FORCE_MAX_N: u64 = 4;

/// Direct integration of `|Psi|^2` over the region in which exactly `n_k`
/// coordinates fall in bin `k`.
///
/// The symmetrised wave function is the normalised permanent expansion of N1
/// copies of `phi1` and N2 copies of `phi2`; because every expansion term is
/// a product of single-coordinate factors, the N-dimensional lattice sum over
/// the ordered counting region factorises exactly into products of per-bin
/// single-axis trapezoid integrals. The value is identical to the literal
/// `M^N` sum, at combinatorial cost.
pub fn brute_force_probability(
    state: &TwoCloudState,
    bins: &BinGrid,
    snapshot: &Snapshot,
) -> Result<f64> {
    let kernel = OverlapKernel::new(state, bins)?;
    if snapshot.len() != kernel.bins() {
        return Err(Error::SnapshotShape {
            bins: snapshot.len(),
            expected: kernel.bins(),
        });
    }
    let n = kernel.total();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::TooManyParticles {
            max: BRUTE_FORCE_MAX_N,
            actual: n,
        });
    }
    if snapshot.total() != n {
        return Ok(0.0);
    }
    let n1 = kernel.n1();
    let scale = ((kernel.n1() * kernel.n2()) as f64).sqrt();
    // per-bin overlap table of the unit-normalised modes
    let tables: Vec<[[Complex64; 2]; 2]> = (0..kernel.bins())
        .map(|k| {
            let r = kernel.r[k];
            [
                [
                    Complex64::new(kernel.p[k] / kernel.n1() as f64, 0.0),
                    r / scale,
                ],
                [
                    r.conj() / scale,
                    Complex64::new(kernel.q[k] / kernel.n2() as f64, 0.0),
                ],
            ]
        })
        .collect();
    // ordered coordinate -> bin assignment
    let mut coordinate_bin = Vec::with_capacity(n as usize);
    for (k, &count) in snapshot.counts().iter().enumerate() {
        for _ in 0..count {
            coordinate_bin.push(k);
        }
    }
    let masks: Vec<u32> = (0u32..1 << n)
        .filter(|m| m.count_ones() as u64 == n1)
        .collect();
    let mut total = Complex64::new(0.0, 0.0);
    for &ket in &masks {
        for &bra in &masks {
            let mut term = Complex64::new(1.0, 0.0);
            for (i, &bin) in coordinate_bin.iter().enumerate() {
                let a = usize::from(ket >> i & 1 == 0); // bit set: mode 1
                let b = usize::from(bra >> i & 1 == 0);
                term *= tables[bin][a][b];
            }
            total += term;
        }
    }
    let prefactor =
        (ln_prefactor_fock(kernel.n1(), kernel.n2()) - ln_factorial_sum(snapshot.counts())).exp();
    Ok(total.re * prefactor)
}

/// `ln(N1! N2!)`.
fn ln_prefactor_fock(n1: u64, n2: u64) -> f64 {
    ln_gamma(n1 as f64 + 1.0) + ln_gamma(n2 as f64 + 1.0)
}

// ---------------------------------------------------------------------------
// Lambda-lattice oracle
// ---------------------------------------------------------------------------

const LAMBDA_MAX_BINS: usize = 3;

/// Numerically inverts the generating function on a per-bin phase lattice.
///
/// The discrete Fourier sum is exact whenever the lattice has more than `N`
/// nodes per dimension, because the generating function is a trigonometric
/// polynomial of degree `N` in every bin phase.
pub fn lambda_lattice_probability(
    state: &TwoCloudState,
    bins: &BinGrid,
    snapshot: &Snapshot,
    quad: &QuadratureSpec,
) -> Result<f64> {
    Ok(lambda_lattice_probabilities(state, bins, std::slice::from_ref(snapshot), quad)?[0])
}

/// Batch variant: the lattice of generating-function values is swept once.
pub fn lambda_lattice_probabilities(
    state: &TwoCloudState,
    bins: &BinGrid,
    snapshots: &[Snapshot],
    quad: &QuadratureSpec,
) -> Result<Vec<f64>> {
    quad.validate()?;
    let kernel = OverlapKernel::new(state, bins)?;
    let k = kernel.bins();
    if k > LAMBDA_MAX_BINS {
        return Err(Error::TooManyBins {
            max: LAMBDA_MAX_BINS,
            actual: k,
        });
    }
    for s in snapshots {
        if s.len() != k {
            return Err(Error::SnapshotShape {
                bins: s.len(),
                expected: k,
            });
        }
    }
    let n = kernel.total();
    let lattice = quad.lambda_nodes;
    if (lattice as u64) < n + 1 {
        return Err(Error::LatticeTooCoarse {
            nodes: lattice,
            particles: n,
        });
    }
    let coarse = lambda_sweep(&kernel, lattice, quad);
    let fine = lambda_sweep(&kernel, lattice, &quad.doubled());
    let delta = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f64, f64::max);
    if delta > CONVERGENCE_TOL {
        return Err(Error::QuadratureNotConverged { delta });
    }
    // inverse DFT at each requested count string
    let points = lattice.pow(k as u32);
    let mut out = Vec::with_capacity(snapshots.len());
    for snapshot in snapshots {
        let mut acc = Complex64::new(0.0, 0.0);
        for (flat, phi) in fine.iter().enumerate() {
            let mut angle = 0.0;
            let mut rest = flat;
            for &count in snapshot.counts().iter().rev() {
                let j = rest % lattice;
                rest /= lattice;
                angle -= TWO_PI * (j as f64) * count as f64 / lattice as f64;
            }
            acc += phi * Complex64::from_polar(1.0, angle);
        }
        out.push((acc / points as f64).re);
    }
    Ok(out)
}

/// Generating-function values on the full per-bin phase lattice.
fn lambda_sweep(kernel: &OverlapKernel, lattice: usize, quad: &QuadratureSpec) -> Vec<Complex64> {
    let outer = panel_rule(quad.theta_nodes);
    let inner = panel_rule(quad.theta_prime_nodes);
    let k = kernel.bins();
    let n = kernel.total();
    let points = lattice.pow(k as u32);
    let tags: Vec<Complex64> = (0..lattice)
        .map(|j| Complex64::from_polar(1.0, TWO_PI * j as f64 / lattice as f64))
        .collect();
    // flat index -> per-bin tag indices, innermost bin varies fastest
    let tag_index = |flat: usize, bin: usize| -> usize {
        let mut rest = flat;
        for _ in bin + 1..k {
            rest /= lattice;
        }
        rest % lattice
    };
    let sums = sweep_ordered(&outer, |theta, w_outer| {
        let mut mu = vec![Complex64::new(0.0, 0.0); k];
        let mut acc = vec![Complex64::new(0.0, 0.0); points];
        for &(theta_prime, w_inner) in &inner {
            kernel.mu_into(theta, theta_prime, &mut mu);
            let w = w_outer * w_inner;
            for (flat, slot) in acc.iter_mut().enumerate() {
                let mut z = Complex64::new(0.0, 0.0);
                for (bin, m) in mu.iter().enumerate() {
                    z += tags[tag_index(flat, bin)] * m;
                }
                *slot += cpow_u64(z, n) * w;
            }
        }
        acc
    });
    let scale = (ln_prefactor(kernel.n1(), kernel.n2()) - ln_gamma(n as f64 + 1.0)).exp();
    sums.iter()
        .map(|z| z / (TWO_PI * TWO_PI) * scale)
        .collect()
}

// ---------------------------------------------------------------------------
// Partial (fixed-phase) distribution
// ---------------------------------------------------------------------------

/// Snapshot distribution conditioned on a definite relative phase: the
/// exactly normalised multinomial over the binned density at that phase.
pub fn partial_probability(
    state: &TwoCloudState,
    bins: &BinGrid,
    snapshot: &Snapshot,
    theta: f64,
) -> Result<f64> {
    let kernel = OverlapKernel::new(state, bins)?;
    if snapshot.len() != kernel.bins() {
        return Err(Error::SnapshotShape {
            bins: snapshot.len(),
            expected: kernel.bins(),
        });
    }
    Ok(partial_probability_kernel(&kernel, snapshot, theta))
}

pub(crate) fn partial_probability_kernel(
    kernel: &OverlapKernel,
    snapshot: &Snapshot,
    theta: f64,
) -> f64 {
    let n = kernel.total();
    if snapshot.total() != n {
        return 0.0;
    }
    let masses = kernel.diagonal_masses(theta);
    let total: f64 = masses.iter().sum();
    let mut ln_p = ln_gamma(n as f64 + 1.0) - ln_factorial_sum(snapshot.counts());
    for (&mass, &count) in masses.iter().zip(snapshot.counts()) {
        if count == 0 {
            continue;
        }
        if mass <= 0.0 {
            return 0.0;
        }
        ln_p += count as f64 * (mass / total).ln();
    }
    ln_p.exp()
}

// ---------------------------------------------------------------------------
// Correlators
// ---------------------------------------------------------------------------

/// Equal-time density correlation functions of the two-cloud state.
///
/// Order 1 is the mean density `|phi1|^2 + |phi2|^2` (no interference term
/// survives the phase average). Order 2 is the pair-correlation density
/// carrying the bunching and two-point interference terms.
pub fn correlator(state: &TwoCloudState, points: &[f64], order: u32) -> Result<f64> {
    match order {
        1 => {
            let [x] = points else {
                return Err(Error::CorrelatorArity {
                    order,
                    got: points.len(),
                });
            };
            let i = state.grid().index_of(*x)?;
            let p1 = state.mode1().values()[i];
            let p2 = state.mode2().values()[i];
            Ok(p1.norm_sqr() + p2.norm_sqr())
        }
        2 => {
            let [xa, xb] = points else {
                return Err(Error::CorrelatorArity {
                    order,
                    got: points.len(),
                });
            };
            let ia = state.grid().index_of(*xa)?;
            let ib = state.grid().index_of(*xb)?;
            let (n1, n2) = (state.n1() as f64, state.n2() as f64);
            let p1a = state.mode1().values()[ia];
            let p1b = state.mode1().values()[ib];
            let p2a = state.mode2().values()[ia];
            let p2b = state.mode2().values()[ib];
            let self1 = (1.0 - 1.0 / n1) * p1a.norm_sqr() * p1b.norm_sqr();
            let self2 = (1.0 - 1.0 / n2) * p2a.norm_sqr() * p2b.norm_sqr();
            let exchange = p1a.norm_sqr() * p2b.norm_sqr() + p1b.norm_sqr() * p2a.norm_sqr();
            let interference = 2.0 * (p1a * p2a.conj() * p1b.conj() * p2b).re;
            Ok(self1 + self2 + exchange + interference)
        }
        other => Err(Error::UnsupportedOrder { order: other }),
    }
}

// ---------------------------------------------------------------------------
// Snapshot enumeration
// ---------------------------------------------------------------------------

/// All count strings with the given total over `bins` bins, first bin
/// descending; the order fixes snapshot ids everywhere.
pub fn enumerate_snapshots(total: u64, bins: usize) -> Vec<Snapshot> {
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(bins);
    fn walk(remaining: u64, bins_left: usize, prefix: &mut Vec<u64>, out: &mut Vec<Snapshot>) {
        if bins_left == 1 {
            prefix.push(remaining);
            out.push(Snapshot::new(prefix.clone()));
            prefix.pop();
            return;
        }
        for first in (0..=remaining).rev() {
            prefix.push(first);
            walk(remaining - first, bins_left - 1, prefix, out);
            prefix.pop();
        }
    }
    walk(total, bins.max(1), &mut prefix, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::physics::CloudSpec;

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

    fn state(d: f64, tau: f64, n1: u64, n2: u64, grid: &Grid) -> TwoCloudState {
        TwoCloudState::gaussian(&spec(d, tau, n1), &spec(d, tau, n2), grid).unwrap()
    }

    fn grid_even() -> Grid {
        Grid::new(-40.0, 40.0, 4097).unwrap()
    }

    /// Wide enough to honour the `d + 6 |a_tau|` span rule, which the
    /// 1e-8-level normalisation checks need.
    fn grid_wide() -> Grid {
        Grid::new(-64.0, 64.0, 4097).unwrap()
    }

    #[test]
    fn generating_function_normalisation() {
        // d = 3.5 keeps the residual mode overlap squared far below 1e-8
        let grid = grid_wide();
        let st = state(3.5, 10.0, 1, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let phi = generating_function(&st, &bins, &LambdaField::zeros(2), &quad).unwrap();
        assert!((phi - Complex64::new(1.0, 0.0)).norm() < 1e-8, "{phi}");
    }

    #[test]
    fn generating_function_constant_field_tags_all_particles() {
        let grid = grid_wide();
        let st = state(3.5, 10.0, 2, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 4).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let c = 0.7;
        let phi = generating_function(&st, &bins, &LambdaField::constant(4, c), &quad).unwrap();
        let expected = Complex64::from_polar(1.0, c * 3.0);
        assert!((phi - expected).norm() < 1e-7, "{phi} vs {expected}");
    }

    #[test]
    fn generating_function_matches_snapshot_transform() {
        // Phi(lambda) must equal sum_n P(n) e^{i lambda . n}; the probability
        // side comes from the independent brute-force route.
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let lambda = LambdaField::new(vec![std::f64::consts::PI, 0.0]);
        let phi = generating_function(&st, &bins, &lambda, &quad).unwrap();
        let mut expected = Complex64::new(0.0, 0.0);
        for snap in enumerate_snapshots(2, 2) {
            let p = brute_force_probability(&st, &bins, &snap).unwrap();
            let angle: f64 = snap
                .counts()
                .iter()
                .zip(lambda.values())
                .map(|(&n, &l)| n as f64 * l)
                .sum();
            expected += Complex64::from_polar(p, angle);
        }
        assert!((phi - expected).norm() < 1e-8, "{phi} vs {expected}");
    }

    #[test]
    fn exact_probability_one_bin_is_certain() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 1).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let p = exact_probability(&st, &bins, &Snapshot::new(vec![2]), &quad).unwrap();
        assert!((p - 1.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn exact_probability_superselection_zero() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let p = exact_probability(&st, &bins, &Snapshot::new(vec![2, 1]), &quad).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn exact_probability_simplex_normalised() {
        let grid = grid_even();
        let quad = QuadratureSpec::for_particles(4);
        for (n1, n2, k) in [(1u64, 1u64, 2usize), (1, 2, 2), (2, 2, 2)] {
            let st = state(3.0, 10.0, n1, n2, &grid);
            let bins = BinGrid::equal_bins(&grid, k).unwrap();
            let snaps = enumerate_snapshots(n1 + n2, k);
            let probs = exact_probabilities(&st, &bins, &snaps, &quad).unwrap();
            let total: f64 = probs.iter().sum();
            assert!(
                (total - 1.0).abs() < 1e-6,
                "N=({n1},{n2}) K={k}: total {total}"
            );
        }
    }

    #[test]
    fn exact_matches_brute_force_on_mixed_occupation() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 2, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 4).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let snap = Snapshot::new(vec![1, 1, 1, 0]);
        let exact = exact_probability(&st, &bins, &snap, &quad).unwrap();
        let brute = brute_force_probability(&st, &bins, &snap).unwrap();
        assert!((exact - brute).abs() < 1e-6, "{exact} vs {brute}");
    }

    #[test]
    fn cloud_swap_leaves_probabilities_unchanged() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 2, 1, &grid);
        let swapped = st.swapped();
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        for snap in enumerate_snapshots(3, 2) {
            let a = exact_probability(&st, &bins, &snap, &quad).unwrap();
            let b = exact_probability(&swapped, &bins, &snap, &quad).unwrap();
            assert!((a - b).abs() < 1e-8, "{:?}: {a} vs {b}", snap.counts());
        }
    }

    #[test]
    fn brute_force_completeness_two_particles() {
        // d = 3.5: the residual overlap contributes only ~2e-11 to the norm
        let grid = grid_wide();
        let st = state(3.5, 10.0, 1, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let total: f64 = enumerate_snapshots(2, 2)
            .iter()
            .map(|s| brute_force_probability(&st, &bins, s).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn brute_force_disjoint_clouds_lock_the_split() {
        // tau = 0 and d = 6: supports effectively disjoint, the bin edge at 0
        // separates the clouds, so the (N1, N2) split is certain.
        let grid = Grid::new(-30.0, 30.0, 3001).unwrap();
        let st = state(6.0, 0.0, 2, 2, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        for snap in enumerate_snapshots(4, 2) {
            let p = brute_force_probability(&st, &bins, &snap).unwrap();
            let expected = if snap.counts() == [2, 2] { 1.0 } else { 0.0 };
            assert!((p - expected).abs() < 1e-8, "{:?}: {p}", snap.counts());
        }
    }

    #[test]
    fn brute_force_rejects_large_states() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 3, 2, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let err = brute_force_probability(&st, &bins, &Snapshot::new(vec![3, 2])).unwrap_err();
        assert!(matches!(err, Error::TooManyParticles { .. }));
    }

    #[test]
    fn lambda_lattice_agrees_with_exact() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        for snap in enumerate_snapshots(2, 2) {
            let lam = lambda_lattice_probability(&st, &bins, &snap, &quad).unwrap();
            let exact = exact_probability(&st, &bins, &snap, &quad).unwrap();
            assert!((lam - exact).abs() < 1e-8, "{:?}: {lam} vs {exact}", snap.counts());
        }
    }

    #[test]
    fn lambda_lattice_agrees_with_brute_force() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 2, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        for snap in enumerate_snapshots(3, 2) {
            let lam = lambda_lattice_probability(&st, &bins, &snap, &quad).unwrap();
            let brute = brute_force_probability(&st, &bins, &snap).unwrap();
            assert!((lam - brute).abs() < 1e-6, "{:?}", snap.counts());
        }
    }

    #[test]
    fn lambda_lattice_wrong_total_vanishes() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let p = lambda_lattice_probability(&st, &bins, &Snapshot::new(vec![1, 2]), &quad).unwrap();
        assert!(p.abs() < 1e-10, "{p}");
    }

    #[test]
    fn lambda_lattice_guards() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 2, 2, &grid);
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let mut quad = QuadratureSpec::for_state(&st);
        quad.lambda_nodes = 4; // N = 4 needs at least 5
        let err =
            lambda_lattice_probability(&st, &bins, &Snapshot::new(vec![2, 2]), &quad).unwrap_err();
        assert!(matches!(err, Error::LatticeTooCoarse { .. }));
        let wide = BinGrid::equal_bins(&grid, 4).unwrap();
        let err = lambda_lattice_probability(
            &st,
            &wide,
            &Snapshot::new(vec![1, 1, 1, 1]),
            &QuadratureSpec::for_state(&st),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooManyBins { .. }));
    }

    #[test]
    fn partial_probability_closed_forms() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        let one_bin = BinGrid::equal_bins(&grid, 1).unwrap();
        let p = partial_probability(&st, &one_bin, &Snapshot::new(vec![2]), 0.4).unwrap();
        assert!((p - 1.0).abs() < 1e-12);

        // fair two-bin multinomial: by symmetry at theta = 0 the two halves
        // carry equal mass
        let bins = BinGrid::equal_bins(&grid, 2).unwrap();
        let p11 = partial_probability(&st, &bins, &Snapshot::new(vec![1, 1]), 0.0).unwrap();
        let p20 = partial_probability(&st, &bins, &Snapshot::new(vec![2, 0]), 0.0).unwrap();
        let p02 = partial_probability(&st, &bins, &Snapshot::new(vec![0, 2]), 0.0).unwrap();
        assert!((p11 - 0.5).abs() < 1e-9);
        assert!((p20 - 0.25).abs() < 1e-9);
        assert!((p02 - 0.25).abs() < 1e-9);
        // wrong total is identically zero
        let p = partial_probability(&st, &bins, &Snapshot::new(vec![1, 2]), 0.0).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn partial_probability_simplex_sums_to_one() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 3, 3, &grid);
        let bins = BinGrid::equal_bins(&grid, 4).unwrap();
        let total: f64 = enumerate_snapshots(6, 4)
            .iter()
            .map(|s| partial_probability(&st, &bins, s, 1.3).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn correlator_order_one_is_incoherent_density() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 2, 3, &grid);
        for i in [100usize, 2048, 3000] {
            let x = grid.x(i);
            let g1 = correlator(&st, &[x], 1).unwrap();
            let expected =
                st.mode1().values()[i].norm_sqr() + st.mode2().values()[i].norm_sqr();
            assert_eq!(g1, expected);
        }
        assert!(matches!(
            correlator(&st, &[grid.x(10) + 0.3 * grid.spacing()], 1),
            Err(Error::PointOffLattice { .. })
        ));
    }

    #[test]
    fn correlator_arity_and_order_checked() {
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        assert!(matches!(
            correlator(&st, &[0.0], 3),
            Err(Error::UnsupportedOrder { .. })
        ));
        assert!(matches!(
            correlator(&st, &[0.0, 1.0], 1),
            Err(Error::CorrelatorArity { .. })
        ));
    }

    #[test]
    fn correlator_matches_generating_function_derivative() {
        // numeric mixed functional derivative of Phi at lambda -> 0 in two
        // small probe bins reproduces the pair-correlation mass
        let grid = grid_even();
        let st = state(3.0, 10.0, 1, 1, &grid);
        let h = grid.spacing();
        let w = 2.0 * h;
        let edges = vec![
            grid.x_min(),
            -w,
            0.0,
            w,
            grid.x_max(),
        ];
        let bins = BinGrid::from_edge_positions(&grid, &edges).unwrap();
        let quad = QuadratureSpec::for_state(&st);
        let eps = 1e-3;
        let phi = |la: f64, lb: f64| {
            generating_function(
                &st,
                &bins,
                &LambdaField::new(vec![0.0, la, lb, 0.0]),
                &quad,
            )
            .unwrap()
        };
        // central mixed difference: second-order accurate in eps
        let mixed = (phi(eps, eps) - phi(eps, -eps) - phi(-eps, eps) + phi(-eps, -eps))
            / Complex64::new(-4.0 * eps * eps, 0.0);
        // expected <n_a n_b> from the pair correlator integrated over the bins
        let xa = grid.x(grid.index_of(-w).unwrap() + 1);
        let xb = grid.x(grid.index_of(0.0).unwrap() + 1);
        let g2 = correlator(&st, &[xa, xb], 2).unwrap();
        let expected = g2 * w * w;
        let rel = (mixed.re - expected).abs() / expected.abs();
        assert!(rel < 1e-4, "fd {} vs correlator {expected}", mixed.re);
    }

    #[test]
    fn enumerate_snapshots_counts() {
        assert_eq!(enumerate_snapshots(2, 2).len(), 3);
        assert_eq!(enumerate_snapshots(4, 3).len(), 15);
        assert_eq!(enumerate_snapshots(3, 1).len(), 1);
        let all = enumerate_snapshots(2, 3);
        assert!(all.iter().all(|s| s.total() == 2));
    }
}
