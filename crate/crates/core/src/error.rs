use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mean value {value} is outside the {family} domain{}", index_suffix(*index))]
    Domain {
        family: String,
        value: f64,
        index: Option<usize>,
    },

    #[error("quadrature did not reach tolerance {tolerance:e} (error estimate {estimate:e})")]
    Quadrature { estimate: f64, tolerance: f64 },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("formula syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column `{column}` has a missing value at row {row}")]
    MissingValue { row: usize, column: String },

    #[error("row {row} has {found} fields, header has {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("design matrix is rank deficient: column `{term}` is collinear with earlier columns")]
    RankDeficient { term: String },

    #[error("group level `{0}` has no observations")]
    EmptyGroup(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("residual variance collapsed to zero (degenerate data)")]
    ZeroResidualVariance,

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("inner mode search diverged for group {group}")]
    InnerDivergence { group: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{label}: {source}")]
    Labeled {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn index_suffix(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(" (element {i})"),
        None => String::new(),
    }
}

impl Error {
    pub fn labeled(self, label: impl Into<String>) -> Self {
        Error::Labeled {
            label: label.into(),
            source: Box::new(self),
        }
    }
}
