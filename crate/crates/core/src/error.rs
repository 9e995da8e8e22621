use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentError {
    #[error("no identifier satisfies the constraints: {0}")]
    InfeasibleConstraint(String),
    #[error("cpl {0} is outside 0..=256")]
    CplOutOfRange(u32),
    #[error("expected 64 lowercase hex characters, got {0:?}")]
    BadHex(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("expected {expected} identifiers, got {got}")]
    WrongCardinality { expected: usize, got: usize },
    #[error("network size estimation needs at least {needed} peers, found {found}")]
    InsufficientPeers { needed: usize, found: usize },
    #[error("model distribution needs n > k (n = {n}, k = {k})")]
    TooSmall { n: f64, k: usize },
    #[error("model probabilities must be non-negative with a positive sum")]
    BadModel,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("eviction would remove a node at cpl >= {0}")]
    Infeasible(u16),
    #[error("invalid insertion: {0}")]
    BadArgument(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("no scenarios given")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
