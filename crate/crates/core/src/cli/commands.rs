//! The four batch commands and their file outputs.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::binning::{BinGrid, Snapshot};
use crate::error::{Error, Result};
use crate::estimation::{
    asymptotic_sigma, fisher_sigma, fisher_sigma_mode_route, PhaseFitter, UniformityVerdict,
    PHASE_HIST_BINS, UNIFORMITY_MIN_SHOTS,
};
use crate::fcs::{
    brute_force_probability, enumerate_snapshots, exact_probabilities,
    lambda_lattice_probabilities,
};
use crate::sampling::{sample_batch, SamplerMode};
use crate::stats;

use super::config::{config_hash, RunConfig};
use super::format::{fmt_float, write_csv, write_pgm};

/// Oracle routes must agree to this absolute tolerance.
const ORACLE_TOL: f64 = 1e-5;
/// The exact route must be normalised to this tolerance over the simplex.
const TOTAL_TOL: f64 = 1e-6;
/// Largest snapshot simplex `cmd exact` will enumerate.
const MAX_SIMPLEX: usize = 10_000;
/// Rows of an exported graymap; every row repeats the bin profile.
const IMAGE_HEIGHT: usize = 32;

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone)]
pub struct ResultManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub files: Vec<String>,
    pub notes: Vec<(String, String)>,
}

impl ResultManifest {
    fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash(config),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            wall_time_s: 0.0,
            files: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: String) {
        self.notes.push((key.to_string(), value));
    }

    pub fn lookup(&self, key: &str) -> Option<&str> {
        self.notes
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(&format!("command = {}\n", self.command));
        text.push_str(&format!("config_hash = {}\n", self.config_hash));
        text.push_str(&format!("version = {}\n", self.version));
        text.push_str(&format!("seed = {}\n", self.seed));
        text.push_str(&format!("wall_time_s = {:.3}\n", self.wall_time_s));
        text.push_str(&format!("files = {}\n", self.files.join(",")));
        for (key, value) in &self.notes {
            text.push_str(&format!("{key} = {value}\n"));
        }
        std::fs::write(dir.join("manifest.txt"), text)?;
        Ok(())
    }
}

fn with_pool<T: Send>(
    workers: Option<usize>,
    body: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match workers {
        None => body(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| {
                    Error::Io(std::io::Error::other(format!("thread pool: {e}")))
                })?;
            pool.install(body)
        }
    }
}

fn prepare(config: &RunConfig, out: &Path) -> Result<(crate::physics::TwoCloudState, BinGrid)> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let state = config.state()?;
    let bins = BinGrid::equal_bins(state.grid(), config.bins)?;
    Ok((state, bins))
}

/// Exact probabilities of every admissible snapshot, cross-checked against
/// both oracles where they apply. Exits nonzero on disagreement.
pub fn cmd_exact(config: &RunConfig, out: &Path, workers: Option<usize>) -> Result<ResultManifest> {
    with_pool(workers, || {
        let start = Instant::now();
        let (state, bins) = prepare(config, out)?;
        let total = state.total();
        if total > 4 {
            return Err(Error::TooManyParticles {
                max: 4,
                actual: total,
            });
        }
        let snaps = enumerate_snapshots(total, bins.len());
        if snaps.len() > MAX_SIMPLEX {
            return Err(Error::InvalidBins {
                reason: format!(
                    "snapshot simplex has {} entries; reduce bins.count",
                    snaps.len()
                ),
            });
        }
        let quad = config.quadrature();
        let exact = exact_probabilities(&state, &bins, &snaps, &quad)?;
        let brute: Vec<f64> = snaps
            .iter()
            .map(|s| brute_force_probability(&state, &bins, s))
            .collect::<Result<_>>()?;
        let lambda: Option<Vec<f64>> = if bins.len() <= 3 && quad.lambda_nodes as u64 >= total + 1
        {
            Some(lambda_lattice_probabilities(&state, &bins, &snaps, &quad)?)
        } else {
            None
        };

        let mut header: Vec<String> = vec!["snapshot_id".into()];
        header.extend((1..=bins.len()).map(|k| format!("n_{k}")));
        header.extend(["p_exact".into(), "p_bruteforce".into(), "p_lambda".into()]);
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<String>> = snaps
            .iter()
            .enumerate()
            .map(|(id, snap)| {
                let mut row = vec![id.to_string()];
                row.extend(snap.counts().iter().map(|c| c.to_string()));
                row.push(fmt_float(exact[id]));
                row.push(fmt_float(brute[id]));
                row.push(lambda.as_ref().map_or(String::new(), |l| fmt_float(l[id])));
                row
            })
            .collect();
        write_csv(&out.join("probabilities.csv"), &header_refs, &rows)?;

        let mut manifest = ResultManifest::new("exact", config);
        manifest.files.push("probabilities.csv".into());
        let exact_total: f64 = exact.iter().sum();
        manifest.note("p_exact_total", fmt_float(exact_total));
        manifest.note("p_bruteforce_total", fmt_float(brute.iter().sum()));
        if let Some(l) = &lambda {
            manifest.note("p_lambda_total", fmt_float(l.iter().sum()));
        }
        let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
        for id in 0..snaps.len() {
            let mut check = |other: f64| {
                let delta = (exact[id] - other).abs();
                if delta > worst.3 {
                    worst = (id, exact[id], other, delta);
                }
            };
            check(brute[id]);
            if let Some(l) = &lambda {
                check(l[id]);
            }
        }
        manifest.note("max_oracle_delta", fmt_float(worst.3));
        manifest.wall_time_s = start.elapsed().as_secs_f64();
        manifest.write(out)?;
        if worst.3 > ORACLE_TOL {
            return Err(Error::OracleDisagreement {
                snapshot_id: worst.0,
                left: worst.1,
                right: worst.2,
                delta: worst.3,
            });
        }
        if (exact_total - 1.0).abs() > TOTAL_TOL {
            return Err(Error::NormalizationDrift { total: exact_total });
        }
        Ok(manifest)
    })
}

/// Generates shots and exports counts, hidden phases (when the sampler has
/// them) and per-shot graymap images scaled by the batch maximum.
pub fn cmd_sample(
    config: &RunConfig,
    out: &Path,
    workers: Option<usize>,
) -> Result<ResultManifest> {
    with_pool(workers, || {
        let start = Instant::now();
        let (state, bins) = prepare(config, out)?;
        let records = sample_batch(&state, &bins, &config.sampler_config())?;

        let mut manifest = ResultManifest::new("sample", config);
        let mut header: Vec<String> = vec!["shot_index".into()];
        header.extend((1..=bins.len()).map(|k| format!("n_{k}")));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                let mut row = vec![r.shot_index.to_string()];
                row.extend(r.snapshot.counts().iter().map(|c| c.to_string()));
                row
            })
            .collect();
        write_csv(&out.join("shots.csv"), &header_refs, &rows)?;
        manifest.files.push("shots.csv".into());

        if config.sampler_mode != SamplerMode::ExactEnumeration {
            let rows: Vec<Vec<String>> = records
                .iter()
                .map(|r| {
                    vec![
                        r.shot_index.to_string(),
                        fmt_float(r.hidden_theta.expect("phase samplers record theta")),
                    ]
                })
                .collect();
            write_csv(&out.join("hidden.csv"), &["shot_index", "theta"], &rows)?;
            manifest.files.push("hidden.csv".into());
        }

        let batch_max = records
            .iter()
            .flat_map(|r| r.snapshot.counts().iter().copied())
            .max()
            .unwrap_or(0)
            .max(1);
        for record in records.iter().take(config.images as usize) {
            let row: Vec<u8> = record
                .snapshot
                .counts()
                .iter()
                .map(|&c| ((255 * c + batch_max / 2) / batch_max) as u8)
                .collect();
            let mut pixels = Vec::with_capacity(row.len() * IMAGE_HEIGHT);
            for _ in 0..IMAGE_HEIGHT {
                pixels.extend_from_slice(&row);
            }
            let name = format!("shot_{:05}.pgm", record.shot_index);
            write_pgm(&out.join(&name), row.len(), IMAGE_HEIGHT, &pixels)?;
            manifest.files.push(name);
        }
        manifest.note("batch_max", batch_max.to_string());
        manifest.wall_time_s = start.elapsed().as_secs_f64();
        manifest.write(out)?;
        Ok(manifest)
    })
}

/// Fits a phase to every snapshot of a shots file and tests the fitted
/// phases for uniformity.
pub fn cmd_estimate(
    config: &RunConfig,
    shots_file: &Path,
    out: &Path,
    workers: Option<usize>,
) -> Result<ResultManifest> {
    with_pool(workers, || {
        let start = Instant::now();
        let (state, bins) = prepare(config, out)?;
        let (indices, snapshots) = read_shots_csv(shots_file, bins.len())?;
        if snapshots.is_empty() {
            return Err(Error::EmptyInput {
                what: "shots file has no data rows",
            });
        }
        let fitter = PhaseFitter::with_objective(&state, &bins, config.estimator)?;
        let fits: Vec<Option<crate::estimation::PhaseEstimate>> = snapshots
            .par_iter()
            .map(|snap| match fitter.fit(snap) {
                Ok(estimate) => Ok(Some(estimate)),
                Err(Error::DegenerateObjective) => Ok(None),
                Err(other) => Err(other),
            })
            .collect::<Result<_>>()?;

        let rows: Vec<Vec<String>> = indices
            .iter()
            .zip(&fits)
            .map(|(idx, fit)| match fit {
                Some(e) => vec![
                    idx.to_string(),
                    fmt_float(e.theta_hat),
                    fmt_float(e.residual),
                    fmt_float(e.sigma_cr),
                ],
                None => vec![
                    idx.to_string(),
                    fmt_float(f64::NAN),
                    fmt_float(f64::NAN),
                    fmt_float(f64::NAN),
                ],
            })
            .collect();
        write_csv(
            &out.join("estimates.csv"),
            &["shot_index", "theta_hat", "residual", "sigma_cr"],
            &rows,
        )?;

        let estimates: Vec<f64> = fits.iter().flatten().map(|e| e.theta_hat).collect();
        let histogram = stats::circular_histogram(&estimates, PHASE_HIST_BINS);
        let hist_rows: Vec<Vec<String>> = histogram
            .iter()
            .enumerate()
            .map(|(b, &count)| {
                let center = (b as f64 + 0.5) / PHASE_HIST_BINS as f64 * std::f64::consts::TAU;
                vec![fmt_float(center), count.to_string()]
            })
            .collect();
        write_csv(
            &out.join("p_theta_hist.csv"),
            &["bin_center", "count"],
            &hist_rows,
        )?;

        let (chi2, p) = stats::chi_square_uniform(&histogram);
        let verdict = if (estimates.len() as u64) < UNIFORMITY_MIN_SHOTS {
            UniformityVerdict::InsufficientData
        } else if p > 0.01 {
            UniformityVerdict::Uniform
        } else {
            UniformityVerdict::NonUniform
        };
        let mut manifest = ResultManifest::new("estimate", config);
        manifest.files = vec!["estimates.csv".into(), "p_theta_hist.csv".into()];
        manifest.note("uniformity_chi2", fmt_float(chi2));
        manifest.note("uniformity_p", fmt_float(p));
        manifest.note("verdict", verdict.as_str().to_string());
        manifest.note(
            "degenerate_rows",
            fits.iter().filter(|f| f.is_none()).count().to_string(),
        );
        manifest.wall_time_s = start.elapsed().as_secs_f64();
        manifest.write(out)?;
        Ok(manifest)
    })
}

/// Cramer-Rao widths over a phase sweep (both algebraic routes) and the
/// particle-number scaling table.
pub fn cmd_fisher(
    config: &RunConfig,
    out: &Path,
    workers: Option<usize>,
) -> Result<ResultManifest> {
    with_pool(workers, || {
        let start = Instant::now();
        let (state, _) = prepare(config, out)?;

        let mut max_rel = 0.0f64;
        let mut flagged = 0usize;
        let rows: Vec<Vec<String>> = (0..64)
            .map(|j| {
                let theta = std::f64::consts::TAU * j as f64 / 64.0;
                match (
                    fisher_sigma(&state, theta),
                    fisher_sigma_mode_route(&state, theta),
                ) {
                    (Ok(a), Ok(b)) => {
                        let rel = (a - b).abs() / a;
                        max_rel = max_rel.max(rel);
                        vec![fmt_float(theta), fmt_float(a), fmt_float(b), fmt_float(rel)]
                    }
                    _ => {
                        flagged += 1;
                        vec![
                            fmt_float(theta),
                            fmt_float(f64::NAN),
                            fmt_float(f64::NAN),
                            fmt_float(f64::NAN),
                        ]
                    }
                }
            })
            .collect();
        write_csv(
            &out.join("fisher.csv"),
            &["theta", "sigma_density", "sigma_modes", "rel_diff"],
            &rows,
        )?;

        let mut log_product = Vec::new();
        let mut log_sigma = Vec::new();
        let scaling_rows: Vec<Vec<String>> = config
            .scaling_counts
            .iter()
            .map(|&n| {
                let spec1 = crate::physics::CloudSpec {
                    particles: n,
                    ..config.cloud1
                };
                let spec2 = crate::physics::CloudSpec {
                    particles: n,
                    ..config.cloud2
                };
                let asym = asymptotic_sigma(&spec1, &spec2)
                    .map(|a| a.sigma)
                    .unwrap_or(f64::NAN);
                let sigma = config
                    .state_with_particles(n, n)
                    .and_then(|s| fisher_sigma(&s, 0.0))
                    .unwrap_or(f64::NAN);
                if sigma.is_finite() {
                    log_product.push(((n as f64) * (n as f64)).ln());
                    log_sigma.push(sigma.ln());
                }
                vec![
                    n.to_string(),
                    n.to_string(),
                    fmt_float(sigma),
                    fmt_float(asym),
                ]
            })
            .collect();
        write_csv(
            &out.join("scaling.csv"),
            &["N1", "N2", "sigma_cr", "asymptotic"],
            &scaling_rows,
        )?;

        let mut manifest = ResultManifest::new("fisher", config);
        manifest.files = vec!["fisher.csv".into(), "scaling.csv".into()];
        manifest.note("max_rel_diff", fmt_float(max_rel));
        manifest.note("zero_information_rows", flagged.to_string());
        if log_product.len() >= 2 {
            let (slope, _) = stats::linear_fit(&log_product, &log_sigma);
            manifest.note("scaling_slope", fmt_float(slope));
        }
        let regime = asymptotic_sigma(&config.cloud1, &config.cloud2)
            .map(|a| a.in_regime)
            .unwrap_or(false);
        manifest.note("asymptotic_in_regime", regime.to_string());
        manifest.wall_time_s = start.elapsed().as_secs_f64();
        manifest.write(out)?;
        Ok(manifest)
    })
}

pub(crate) fn read_shots_csv(path: &Path, expected_bins: usize) -> Result<(Vec<u64>, Vec<Snapshot>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput {
        what: "shots file is empty",
    })?;
    let columns = header.split(',').count();
    if columns != expected_bins + 1 {
        return Err(Error::SnapshotShape {
            bins: columns.saturating_sub(1),
            expected: expected_bins,
        });
    }
    let mut indices = Vec::new();
    let mut snapshots = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse = |v: Option<&str>| -> Result<u64> {
            v.and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or(Error::Config {
                    line: lineno + 2,
                    reason: format!("bad shots row `{line}`"),
                })
        };
        indices.push(parse(fields.next())?);
        let counts: Vec<u64> = (0..expected_bins)
            .map(|_| parse(fields.next()))
            .collect::<Result<_>>()?;
        snapshots.push(Snapshot::new(counts));
    }
    Ok((indices, snapshots))
}
