//! Flat `key = value` run configuration.
//!
//! The format is line oriented with dotted section prefixes
//! (`cloud1.width = 1.0`). Unknown keys are rejected with their line number,
//! every constraint violation names the invariant it breaks, and an empty
//! file yields the documented default scenario.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::Objective;
use crate::grid::Grid;
use crate::physics::{CloudSpec, TwoCloudState};
use crate::sampling::{SamplerConfig, SamplerMode};

use super::format::fmt_float;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cloud1: CloudSpec,
    pub cloud2: CloudSpec,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub bins: usize,
    /// 0 selects the automatic budget of 64 nodes per particle.
    pub theta_nodes: usize,
    pub theta_prime_nodes: usize,
    pub lambda_nodes: usize,
    pub sampler_mode: SamplerMode,
    pub shots: u64,
    pub seed: u64,
    pub pin_theta: Option<f64>,
    /// How many leading shots are exported as graymap images.
    pub images: u64,
    pub estimator: Objective,
    /// Per-cloud particle numbers of the Fisher scaling sweep.
    pub scaling_counts: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cloud = CloudSpec {
            initial_width: 1.0,
            center_offset: 3.0,
            expansion_time: 10.0,
            particles: 5000,
            mass: 1.0,
            hbar: 1.0,
        };
        Self {
            cloud1: cloud,
            cloud2: cloud,
            grid_min: -40.0,
            grid_max: 40.0,
            grid_points: 4096,
            bins: 64,
            theta_nodes: 0,
            theta_prime_nodes: 0,
            lambda_nodes: 8,
            sampler_mode: SamplerMode::ThetaMultinomial,
            shots: 100,
            seed: 1,
            pin_theta: None,
            images: 4,
            estimator: Objective::LeastSquares,
            scaling_counts: vec![100, 1000, 10_000, 100_000],
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid_min, self.grid_max, self.grid_points)
    }

    pub fn state(&self) -> Result<TwoCloudState> {
        TwoCloudState::gaussian(&self.cloud1, &self.cloud2, &self.grid()?)
    }

    /// Same geometry with both particle numbers replaced; used by sweeps.
    pub fn state_with_particles(&self, n1: u64, n2: u64) -> Result<TwoCloudState> {
        let cloud1 = CloudSpec {
            particles: n1,
            ..self.cloud1
        };
        let cloud2 = CloudSpec {
            particles: n2,
            ..self.cloud2
        };
        TwoCloudState::gaussian(&cloud1, &cloud2, &self.grid()?)
    }

    pub fn quadrature(&self) -> crate::fcs::QuadratureSpec {
        let total = self.cloud1.particles + self.cloud2.particles;
        let mut quad = crate::fcs::QuadratureSpec::for_particles(total);
        if self.theta_nodes > 0 {
            quad.theta_nodes = self.theta_nodes;
        }
        if self.theta_prime_nodes > 0 {
            quad.theta_prime_nodes = self.theta_prime_nodes;
        }
        quad.lambda_nodes = self.lambda_nodes;
        quad
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            mode: self.sampler_mode,
            shots: self.shots,
            seed: self.seed,
            pin_theta: self.pin_theta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cloud1
            .validate()
            .map_err(|e| named_invariant("cloud1", e))?;
        self.cloud2
            .validate()
            .map_err(|e| named_invariant("cloud2", e))?;
        let grid = self.grid().map_err(|e| named_invariant("grid", e))?;
        if self.bins == 0 || self.bins > grid.len() - 1 {
            return Err(Error::Config {
                line: 0,
                reason: format!(
                    "bins.count: invariant 1 <= K <= lattice cells violated (K = {}, cells = {})",
                    self.bins,
                    grid.len() - 1
                ),
            });
        }
        for (name, nodes) in [
            ("quad.theta_nodes", self.theta_nodes),
            ("quad.theta_prime_nodes", self.theta_prime_nodes),
        ] {
            if nodes != 0 && nodes < 16 {
                return Err(Error::Config {
                    line: 0,
                    reason: format!("{name}: invariant nodes >= 16 violated (got {nodes})"),
                });
            }
        }
        if self.lambda_nodes < 2 {
            return Err(Error::Config {
                line: 0,
                reason: "quad.lambda_nodes: invariant nodes >= 2 violated".into(),
            });
        }
        if self.shots < 1 {
            return Err(Error::Config {
                line: 0,
                reason: "sampler.shots: invariant shots >= 1 violated".into(),
            });
        }
        if self.scaling_counts.is_empty() || self.scaling_counts.iter().any(|&n| n < 1) {
            return Err(Error::Config {
                line: 0,
                reason: "fisher.scaling: invariant non-empty positive counts violated".into(),
            });
        }
        Ok(())
    }
}

fn named_invariant(section: &str, err: Error) -> Error {
    Error::Config {
        line: 0,
        reason: format!("{section}: {err}"),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config {
                line: line_no,
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config {
                line: line_no,
                reason: format!("duplicate key `{key}`"),
            });
        }
        apply_key(&mut config, key, value).map_err(|reason| Error::Config {
            line: line_no,
            reason,
        })?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_key(config: &mut RunConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn float(v: &str) -> std::result::Result<f64, String> {
        v.parse::<f64>().map_err(|_| format!("`{v}` is not a number"))
    }
    fn integer(v: &str) -> std::result::Result<u64, String> {
        v.parse::<u64>()
            .map_err(|_| format!("`{v}` is not a non-negative integer"))
    }
    match key {
        "cloud1.width" => config.cloud1.initial_width = float(value)?,
        "cloud1.offset" => config.cloud1.center_offset = float(value)?,
        "cloud1.tau" => config.cloud1.expansion_time = float(value)?,
        "cloud1.particles" => config.cloud1.particles = integer(value)?,
        "cloud1.mass" => config.cloud1.mass = float(value)?,
        "cloud1.hbar" => config.cloud1.hbar = float(value)?,
        "cloud2.width" => config.cloud2.initial_width = float(value)?,
        "cloud2.offset" => config.cloud2.center_offset = float(value)?,
        "cloud2.tau" => config.cloud2.expansion_time = float(value)?,
        "cloud2.particles" => config.cloud2.particles = integer(value)?,
        "cloud2.mass" => config.cloud2.mass = float(value)?,
        "cloud2.hbar" => config.cloud2.hbar = float(value)?,
        "grid.min" => config.grid_min = float(value)?,
        "grid.max" => config.grid_max = float(value)?,
        "grid.points" => config.grid_points = integer(value)? as usize,
        "bins.count" => config.bins = integer(value)? as usize,
        "quad.theta_nodes" => config.theta_nodes = integer(value)? as usize,
        "quad.theta_prime_nodes" => config.theta_prime_nodes = integer(value)? as usize,
        "quad.lambda_nodes" => config.lambda_nodes = integer(value)? as usize,
        "sampler.mode" => {
            config.sampler_mode = match value {
                "exact-enumeration" => SamplerMode::ExactEnumeration,
                "theta-multinomial" => SamplerMode::ThetaMultinomial,
                "theta-poisson" => SamplerMode::ThetaPoisson,
                other => return Err(format!("unknown sampler mode `{other}`")),
            }
        }
        "sampler.shots" => config.shots = integer(value)?,
        "sampler.seed" => config.seed = integer(value)?,
        "sampler.pin_theta" => {
            config.pin_theta = match value {
                "none" => None,
                v => Some(float(v)?),
            }
        }
        "sampler.images" => config.images = integer(value)?,
        "estimator.objective" => {
            config.estimator = match value {
                "least-squares" => Objective::LeastSquares,
                "max-likelihood" => Objective::MaxLikelihood,
                other => return Err(format!("unknown estimator `{other}`")),
            }
        }
        "fisher.scaling" => {
            let counts: std::result::Result<Vec<u64>, String> = value
                .split(',')
                .map(|v| integer(v.trim()))
                .collect();
            config.scaling_counts = counts?;
        }
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// Canonical serialization: fixed key order, 17-digit floats. Feeding the
/// output back through [`parse_config`] reproduces it byte for byte.
pub fn serialize_config(config: &RunConfig) -> String {
    let mut out = String::new();
    let mut kv = |key: &str, value: String| {
        out.push_str(key);
        out.push_str(" = ");
        out.push_str(&value);
        out.push('\n');
    };
    for (name, cloud) in [("cloud1", &config.cloud1), ("cloud2", &config.cloud2)] {
        kv(&format!("{name}.width"), fmt_float(cloud.initial_width));
        kv(&format!("{name}.offset"), fmt_float(cloud.center_offset));
        kv(&format!("{name}.tau"), fmt_float(cloud.expansion_time));
        kv(&format!("{name}.particles"), cloud.particles.to_string());
        kv(&format!("{name}.mass"), fmt_float(cloud.mass));
        kv(&format!("{name}.hbar"), fmt_float(cloud.hbar));
    }
    kv("grid.min", fmt_float(config.grid_min));
    kv("grid.max", fmt_float(config.grid_max));
    kv("grid.points", config.grid_points.to_string());
    kv("bins.count", config.bins.to_string());
    kv("quad.theta_nodes", config.theta_nodes.to_string());
    kv(
        "quad.theta_prime_nodes",
        config.theta_prime_nodes.to_string(),
    );
    kv("quad.lambda_nodes", config.lambda_nodes.to_string());
    let mode = match config.sampler_mode {
        SamplerMode::ExactEnumeration => "exact-enumeration",
        SamplerMode::ThetaMultinomial => "theta-multinomial",
        SamplerMode::ThetaPoisson => "theta-poisson",
    };
    kv("sampler.mode", mode.to_string());
    kv("sampler.shots", config.shots.to_string());
    kv("sampler.seed", config.seed.to_string());
    kv(
        "sampler.pin_theta",
        config
            .pin_theta
            .map_or_else(|| "none".to_string(), fmt_float),
    );
    kv("sampler.images", config.images.to_string());
    let estimator = match config.estimator {
        Objective::LeastSquares => "least-squares",
        Objective::MaxLikelihood => "max-likelihood",
    };
    kv("estimator.objective", estimator.to_string());
    kv(
        "fisher.scaling",
        config
            .scaling_counts
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    out
}

/// Stable hex digest of the canonical config text.
pub fn config_hash(config: &RunConfig) -> String {
    let digest = Sha256::digest(serialize_config(config).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let config = parse_config("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.cloud1.center_offset, 3.0);
        assert_eq!(config.bins, 64);
        assert_eq!(config.cloud1.particles, 5000);
    }

    #[test]
    fn invalid_width_names_the_invariant() {
        let err = parse_config("cloud1.width = -1").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("initial_width"), "{text}");
        assert!(text.contains("positive"), "{text}");
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = parse_config("grid.min = -40\nbogus.key = 3\n").unwrap_err();
        match err {
            Error::Config { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("bogus.key"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse_config("grid.points = 128\ngrid.points = 256\n").is_err());
    }

    #[test]
    fn serialization_is_idempotent() {
        let text = "cloud1.tau = 2.5\nsampler.mode = theta-poisson\nsampler.pin_theta = 0.5\nfisher.scaling = 10, 20\n";
        let once = serialize_config(&parse_config(text).unwrap());
        let twice = serialize_config(&parse_config(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse_config("").unwrap();
        let b = parse_config("sampler.seed = 2").unwrap();
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a), config_hash(&RunConfig::default()));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let config = parse_config("# a comment\n\n  bins.count = 8\n").unwrap();
        assert_eq!(config.bins, 8);
    }
}
