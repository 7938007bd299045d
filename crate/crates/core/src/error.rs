use std::fmt;

use crate::cache::SegmentRole;
use crate::router::SubTaskKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One violated rule found while validating a conversation script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    /// Dotted path of the offending field, e.g. `turns[3].scripted_retrieval`.
    pub path: String,
    pub rule: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.rule)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("lineage violation: {0}")]
    Lineage(String),

    #[error("role violation: expected {expected}, found {found}")]
    Role {
        expected: &'static str,
        found: SegmentRole,
    },

    #[error("position {position} exceeds max position {max}")]
    PositionOverflow { position: u32, max: u32 },

    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("no scripted output for turn {turn}, stage {stage}")]
    Scripting { turn: u32, stage: String },

    #[error("unparseable classifier output for {kind}: {output:?}")]
    ClassificationFormat { kind: String, output: String },

    #[error("script validation failed with {} issue(s)", .0.len())]
    Validation(Vec<ValidationIssue>),

    #[error("unbound template placeholder {{{0}}}")]
    Template(String),

    #[error("unknown template {0:?}")]
    UnknownTemplate(String),

    #[error("invalid synthetic profile: {0}")]
    Profile(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backend does not support {0}")]
    Unsupported(&'static str),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("missing instruction for {0}")]
    MissingInstruction(SubTaskKind),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        match self {
            // keep the innermost tag; nested tags only add noise
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The stage tag attached to this error, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Strips any stage tag.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
