use thiserror::Error;

use crate::findings::Finding;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no harmonization rule for item `{0}`")]
    MissingRule(String),
    #[error("value `{value}` of item `{item}` is not covered by its code table")]
    CodeTableGap { item: String, value: String },
    #[error("value `{value}` of item `{item}` is not a valid number")]
    InvalidNumber { item: String, value: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot merge `{a}` and `{b}`: they belong to different anchors")]
    CrossAnchorMerge { a: String, b: String },
    #[error("`{0}` is not a splittable leaf")]
    NotALeaf(String),
    #[error("duplicate child id `{0}`")]
    DuplicateChildId(String),
    #[error("unknown subdimension `{0}`")]
    UnknownSubdimension(String),

    #[error("missing coverage weight for item `{0}`")]
    MissingCoverage(String),
    #[error("stale mapping: {0}")]
    StaleMapping(String),
    #[error("item `{0}` has not been standardized by a fold transform")]
    NotStandardized(String),

    #[error("training data contain a single class")]
    SingleClassTrain,
    #[error("empty input")]
    EmptyInput,
    #[error("target has zero variance")]
    ZeroVarianceTarget,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("too few rows: have {have}, need at least {need}")]
    TooFewRows { have: usize, need: usize },
    #[error("leakage: {0}")]
    LeakageViolation(String),
    #[error("stale version: {0}")]
    StaleVersion(String),

    #[error("inconsistent round: {0}")]
    InconsistentRound(String),
    #[error("reallocation touches item `{0}` outside the target neighborhood")]
    NeighborhoodViolation(String),
    #[error("anchored weights changed: {0}")]
    AnchorViolation(String),
    #[error("invalid reallocation: {}", summarize(.0))]
    InvalidReallocation(Vec<Finding>),
    #[error("proposer failure: {0}")]
    ProposerFailure(String),

    #[error("template slot `{0}` has no value")]
    MissingSlot(String),
    #[error("outcome data may not enter a proposal request: {0}")]
    OutcomeLeak(String),
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("network error: {0}")]
    Network(String),
    #[error("rate limited")]
    RateLimited,
    #[error("giving up after {attempts} attempts: {last}")]
    MaxRetries { attempts: u32, last: String },
}

fn summarize(findings: &[Finding]) -> String {
    findings
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
            Error::Schema(_) => "SchemaError",
            Error::DuplicateId(_) => "DuplicateId",
            Error::UnknownItem(_) => "UnknownItem",
            Error::UnknownPredicate(_) => "UnknownPredicate",
            Error::Precondition(_) => "Precondition",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::MissingRule(_) => "MissingRule",
            Error::CodeTableGap { .. } => "CodeTableGap",
            Error::InvalidNumber { .. } => "InvalidNumber",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::CrossAnchorMerge { .. } => "CrossAnchorMerge",
            Error::NotALeaf(_) => "NotALeaf",
            Error::DuplicateChildId(_) => "DuplicateChildId",
            Error::UnknownSubdimension(_) => "UnknownSubdimension",
            Error::MissingCoverage(_) => "MissingCoverage",
            Error::StaleMapping(_) => "StaleMapping",
            Error::NotStandardized(_) => "NotStandardized",
            Error::SingleClassTrain => "SingleClassTrain",
            Error::EmptyInput => "EmptyInput",
            Error::ZeroVarianceTarget => "ZeroVarianceTarget",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::TooFewRows { .. } => "TooFewRows",
            Error::LeakageViolation(_) => "LeakageViolation",
            Error::StaleVersion(_) => "StaleVersion",
            Error::InconsistentRound(_) => "InconsistentRound",
            Error::NeighborhoodViolation(_) => "NeighborhoodViolation",
            Error::AnchorViolation(_) => "AnchorViolation",
            Error::InvalidReallocation(_) => "InvalidReallocation",
            Error::ProposerFailure(_) => "ProposerFailure",
            Error::MissingSlot(_) => "MissingSlot",
            Error::OutcomeLeak(_) => "OutcomeLeak",
            Error::UnparseableResponse(_) => "UnparseableResponse",
            Error::ConstraintViolation(_) => "ConstraintViolation",
            Error::Network(_) => "NetworkError",
            Error::RateLimited => "RateLimited",
            Error::MaxRetries { .. } => "MaxRetries",
        }
    }
}
