use alloc::string::String;

/// Violated identification assumption, named after the positivity conditions
/// the estimators rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assumption {
    /// Some trial has no eligible patient (needed for every trial by the uniform effect).
    EligibilityPositivity,
    /// Fitted treatment probability at 0 or 1 on an eligible row.
    TreatmentPositivity,
    /// Conditional probability of reaching a trial given baseline covariates is 0.
    ParticipationPositivity,
}

impl core::fmt::Display for Assumption {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Assumption::EligibilityPositivity => "positivity of eligibility",
            Assumption::TreatmentPositivity => "positivity of treatment",
            Assumption::ParticipationPositivity => "positivity of trial participation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("duplicate record for patient `{patient}` at t={t}")]
    DuplicateRecord { patient: String, t: u32 },
    #[error("treatment non-monotone for patient `{patient}` at t={t}")]
    NonMonotoneTreatment { patient: String, t: u32 },
    #[error("design matrix is rank deficient (column {column})")]
    RankDeficient { column: usize },
    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("complete or quasi-complete separation detected")]
    Separation,
    #[error("singular matrix: {0}")]
    Singular(&'static str),
    #[error("{assumption} violated: {detail}")]
    Positivity { assumption: Assumption, detail: String },
    #[error("estimand undefined: {0}")]
    Undefined(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
