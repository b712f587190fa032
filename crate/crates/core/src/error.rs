use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("matrix contains a non-finite entry")]
    NonFinite,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("missing statistic from node {sender} for class {class} at round {round}")]
    MissingStat { sender: usize, class: usize, round: usize },

    #[error("dual update class mismatch: {left} vs {right}")]
    ClassMismatch { left: usize, right: usize },

    #[error("node {node} is not a member of cluster {cluster}")]
    PlanMismatch { node: usize, cluster: usize },

    #[error("invalid encoder architecture: {0}")]
    BadArch(String),

    #[error("replicas of agent {0} have different architectures")]
    ArchMismatch(usize),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("no connected graph after {attempts} resamples (n = {n_nodes}, p = {p})")]
    Unconnectable { n_nodes: usize, p: f64, attempts: usize },

    #[error("unknown recipient node {0}")]
    UnknownRecipient(usize),

    #[error("label {0} is held by no agent")]
    UncoverableLabel(usize),

    #[error("agent {0} holds no labels")]
    EmptyLabelSet(usize),

    #[error("invalid dimensions: {0}")]
    BadDims(String),

    #[error("bad magic: {0}")]
    BadMagic(String),

    #[error("unsupported IDX element type 0x{0:02x}")]
    TypeUnsupported(u8),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },

    #[error("class {class} has {available} samples but {required} are required")]
    InsufficientSamples {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
