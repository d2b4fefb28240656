use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter `{name}` must be positive, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },

    #[error("grid too small: truncated norm deviates from {expected} by relative {deviation:.3e} (tolerance {tolerance:.1e})")]
    GridTooSmall {
        expected: f64,
        deviation: f64,
        tolerance: f64,
    },

    #[error("modes live on different grids")]
    GridMismatch,

    #[error("cloud modes are not orthogonal: |<phi1|phi2>|/sqrt(N1 N2) = {overlap:.3e} exceeds tolerance {tolerance:.1e}")]
    NonOrthogonalModes { overlap: f64, tolerance: f64 },

    #[error("bin edge {edge} does not coincide with a lattice point")]
    MisalignedEdges { edge: f64 },

    #[error("invalid bin layout: {reason}")]
    InvalidBins { reason: String },

    #[error("merge map groups must be contiguous and cover every group index")]
    NonContiguousGroups,

    #[error("quadrature not converged: doubling nodes changed the result by {delta:.3e}")]
    QuadratureNotConverged { delta: f64 },

    #[error("quadrature spec invalid: {reason}")]
    InvalidQuadrature { reason: String },

    #[error("brute-force oracle limited to N <= {max}, state has N = {actual}")]
    TooManyParticles { max: u64, actual: u64 },

    #[error("lambda lattice too coarse: {nodes} nodes per dimension alias integer frequencies up to N = {particles}")]
    LatticeTooCoarse { nodes: usize, particles: u64 },

    #[error("lambda lattice oracle limited to K <= {max} bins, got {actual}")]
    TooManyBins { max: usize, actual: usize },

    #[error("snapshot has {bins} bins but the grid defines {expected}")]
    SnapshotShape { bins: usize, expected: usize },

    #[error("snapshot total {got} does not match the state total {expected}")]
    WrongTotal { expected: u64, got: u64 },

    #[error("need at least {required} shots, got {got}")]
    InsufficientShots { required: u64, got: u64 },

    #[error("sampler: exact enumeration limited to N <= 4 and K <= 6, got N = {particles}, K = {bins}")]
    EnumerationDomainExceeded { particles: u64, bins: usize },

    #[error("sampler: conditioned Poisson rejected {limit} proposals without hitting the total")]
    RejectionLimitExceeded { limit: u64 },

    #[error("objective is constant over the phase scan; the snapshot carries no phase information")]
    DegenerateObjective,

    #[error("Fisher information below {floor:.1e}: the density carries no phase information")]
    ZeroInformation { floor: f64 },

    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },

    #[error("correlator order {order} is not supported (1 or 2)")]
    UnsupportedOrder { order: u32 },

    #[error("correlator of order {order} takes {order} points, got {got}")]
    CorrelatorArity { order: u32, got: usize },

    #[error("point {x} is not on the lattice")]
    PointOffLattice { x: f64 },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("oracle disagreement at snapshot {snapshot_id}: |{left} - {right}| = {delta:.3e} exceeds 1e-5")]
    OracleDisagreement {
        snapshot_id: usize,
        left: f64,
        right: f64,
        delta: f64,
    },

    #[error("exact probabilities sum to {total} instead of 1")]
    NormalizationDrift { total: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
