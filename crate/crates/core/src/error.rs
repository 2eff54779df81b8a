use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("distributions are defined over different tuple spaces")]
    SpaceMismatch,

    #[error("coordinate {index} out of range for arity {arity}")]
    CoordinateOutOfRange { index: usize, arity: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no probability mass observed")]
    NoMassObserved,

    #[error("conditional normalizer is zero for cluster center {center:?}")]
    ZeroConditionalMass { center: String },

    #[error(
        "stabilization parameters violate the certificate precondition: \
         gamma1 = {gamma1} (required {required_gamma1}), gamma2 = {gamma2} (required >= {required_gamma2})"
    )]
    GammaPrecondition {
        gamma1: f64,
        gamma2: f64,
        required_gamma1: f64,
        required_gamma2: f64,
    },

    #[error("degenerate normalization: both probabilities are zero")]
    DegenerateNormalization,

    #[error("backend failure at chain step {step}: {source}")]
    ChainStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown query {0:?}")]
    UnknownQuery(String),

    #[error("cannot parse prompt: {0}")]
    Prompt(String),

    #[error("http request {request_id} to {url} failed: {message}")]
    Http {
        url: String,
        request_id: String,
        status: Option<u16>,
        message: String,
    },

    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),

    #[error("endpoint lacks a required capability: {0}")]
    Capability(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
