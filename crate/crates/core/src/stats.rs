//! Statistical tests and circular summary statistics used by the
//! estimation pipeline and the verification suites.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Chi-square goodness of fit of observed counts against cell probabilities.
/// Returns `(statistic, p_value)` with `cells - 1` degrees of freedom.
pub fn chi_square_gof(observed: &[u64], probabilities: &[f64]) -> (f64, f64) {
    assert_eq!(observed.len(), probabilities.len());
    let n: f64 = observed.iter().map(|&o| o as f64).sum();
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&o, &p) in observed.iter().zip(probabilities) {
        if p <= 0.0 {
            continue;
        }
        let expected = n * p;
        let d = o as f64 - expected;
        stat += d * d / expected;
        cells += 1;
    }
    (stat, chi_square_p(stat, cells as f64 - 1.0))
}

/// Chi-square uniformity test across equal-probability cells.
pub fn chi_square_uniform(observed: &[u64]) -> (f64, f64) {
    let p = vec![1.0 / observed.len() as f64; observed.len()];
    chi_square_gof(observed, &p)
}

/// Two-sample chi-square homogeneity test over shared cells.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let total_a: f64 = a.iter().map(|&x| x as f64).sum();
    let total_b: f64 = b.iter().map(|&x| x as f64).sum();
    let scale_ab = (total_b / total_a).sqrt();
    let scale_ba = (total_a / total_b).sqrt();
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&oa, &ob) in a.iter().zip(b) {
        let sum = (oa + ob) as f64;
        if sum == 0.0 {
            continue;
        }
        let d = scale_ab * oa as f64 - scale_ba * ob as f64;
        stat += d * d / sum;
        cells += 1;
    }
    (stat, chi_square_p(stat, cells as f64 - 1.0))
}

fn chi_square_p(stat: f64, df: f64) -> f64 {
    if df <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// Anderson-Darling normality test with estimated mean and variance.
/// Returns `(A*^2, p_value)` using the standard small-sample correction.
pub fn anderson_darling_normal(sample: &[f64]) -> (f64, f64) {
    let n = sample.len();
    assert!(n >= 8, "Anderson-Darling needs at least 8 observations");
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let mut z: Vec<f64> = sample.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut a2 = 0.0;
    for i in 0..n {
        let cdf_lo = normal.cdf(z[i]).clamp(1e-300, 1.0 - 1e-16);
        let cdf_hi = normal.cdf(z[n - 1 - i]).clamp(1e-300, 1.0 - 1e-16);
        a2 += (2.0 * i as f64 + 1.0) * (cdf_lo.ln() + (1.0 - cdf_hi).ln());
    }
    a2 = -nf - a2 / nf;
    let a2_star = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    (a2_star, anderson_darling_p(a2_star))
}

fn anderson_darling_p(a2: f64) -> f64 {
    // D'Agostino & Stephens piecewise fit for the estimated-parameters case
    if a2 >= 0.6 {
        (1.2937 - 5.709 * a2 + 0.0186 * a2 * a2).exp().min(1.0)
    } else if a2 >= 0.34 {
        (0.9177 - 4.279 * a2 - 1.38 * a2 * a2).exp().min(1.0)
    } else if a2 >= 0.2 {
        1.0 - (-8.318 + 42.796 * a2 - 59.938 * a2 * a2).exp()
    } else {
        1.0 - (-13.436 + 101.14 * a2 - 223.73 * a2 * a2).exp()
    }
}

/// Shortest signed distance from `a` to `b` on the circle, in `(-pi, pi]`.
pub fn wrap_difference(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(TWO_PI);
    if d > std::f64::consts::PI {
        d -= TWO_PI;
    }
    d
}

/// Absolute circular distance.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    wrap_difference(a, b).abs()
}

/// Circular mean direction of a sample, in `[0, 2 pi)`.
pub fn circular_mean(sample: &[f64]) -> f64 {
    let (s, c) = sample
        .iter()
        .fold((0.0, 0.0), |(s, c), &t| (s + t.sin(), c + t.cos()));
    s.atan2(c).rem_euclid(TWO_PI)
}

/// Mean resultant length in `[0, 1]`; 1 means fully concentrated.
pub fn circular_resultant(sample: &[f64]) -> f64 {
    let (s, c) = sample
        .iter()
        .fold((0.0, 0.0), |(s, c), &t| (s + t.sin(), c + t.cos()));
    (s * s + c * c).sqrt() / sample.len() as f64
}

/// Circular standard deviation `sqrt(-2 ln R)`; approaches the linear
/// standard deviation for tightly concentrated samples.
pub fn circular_std(sample: &[f64]) -> f64 {
    let r = circular_resultant(sample).clamp(f64::MIN_POSITIVE, 1.0);
    (-2.0 * r.ln()).sqrt()
}

/// Histogram of circular values over `bins` equal arcs of `[0, 2 pi)`.
pub fn circular_histogram(sample: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &t in sample {
        let pos = t.rem_euclid(TWO_PI) / TWO_PI * bins as f64;
        let mut idx = pos as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    counts
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
