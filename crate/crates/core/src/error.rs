use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown scenario or variant `{0}`")]
    UnknownVariant(String),

    #[error("likelihood underflow for subject `{subject}` at occasion {t}")]
    Underflow { subject: String, t: usize },

    #[error("non-finite emission density for state {state}: {detail}")]
    DegenerateEmission { state: usize, detail: String },

    #[error("intensity overflow for transition {from}->{to} (log-rate {logit})")]
    IntensityOverflow { from: usize, to: usize, logit: f64 },

    #[error("transition probability {value:e} below 1e-300 at subject `{subject}`, occasion {t}, {from}->{to}")]
    VanishingProbability {
        subject: String,
        t: usize,
        from: usize,
        to: usize,
        value: f64,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("matrix exponential: {0}")]
    Expm(String),

    #[error("gaussian mixture: {0}")]
    EmptyComponent(String),

    #[error("log-likelihood decreased by {drop:e} at iteration {iteration}")]
    Instability { iteration: usize, drop: f64 },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::InvalidData(_)
            | Error::InvalidParams(_)
            | Error::InvalidConfig(_)
            | Error::DimensionMismatch(_)
            | Error::UnknownVariant(_) => false,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => true,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        match self {
            e @ Error::AtIteration { .. } => e,
            e => Error::AtIteration {
                iteration,
                source: Box::new(e),
            },
        }
    }
}
