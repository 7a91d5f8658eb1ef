use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },

    #[error("kNN neighbor count is zero for N={n}, K={k}, r_top_prime={r_top_prime}; lower r_top_prime")]
    ZeroNeighbors { n: usize, k: usize, r_top_prime: f64 },

    #[error("centroid for class {0} has zero total weight")]
    ZeroWeight(usize),

    #[error("memory quota is zero: capacity {capacity} cannot hold {domains} domains")]
    ZeroQuota { capacity: usize, domains: usize },

    #[error("unknown preset {name:?}; available: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// True for errors caused by user input rather than a failing computation.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnknownPreset { .. } => true,
            Error::Context { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
