use crate::forest::{ConceptId, TreeId};

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report. Each variant maps to a stable
/// machine-readable code through [`Error::code`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("duplicate tree id `{0}`")]
    DuplicateTreeId(TreeId),
    #[error("duplicate concept id `{0}`")]
    DuplicateConceptId(ConceptId),
    #[error("malformed hierarchy in tree `{tree}`: {detail}")]
    MalformedHierarchy { tree: TreeId, detail: String },
    #[error("invalid tree `{tree}`: {detail}")]
    InvalidTree { tree: TreeId, detail: String },

    #[error("unknown tree `{0}`")]
    TreeNotFound(TreeId),
    #[error("unknown concept `{0}`")]
    ConceptNotFound(ConceptId),
    #[error("unknown user `{0}`")]
    UserNotFound(String),
    #[error("unknown template `{0}`")]
    TemplateNotFound(String),
    #[error("unknown relation kind `{0}`")]
    RelationKindNotFound(String),

    #[error("concept `{0}` has no embedding")]
    MissingEmbedding(ConceptId),
    #[error("tree `{0}` has no root embedding")]
    MissingTreeVector(TreeId),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label `{0}` is not in the class set")]
    UnknownLabel(String),
    #[error("the forest is empty")]
    EmptyForest,
    #[error("no embeddings yet; train first")]
    NotTrained,

    #[error("template syntax error at byte {offset}: {detail}")]
    TemplateSyntax { offset: usize, detail: String },
    #[error("slot `{0}` appears in the text but is not declared")]
    UndeclaredSlotInText(String),
    #[error("missing value for slot `{0}`")]
    MissingSlot(String),
    #[error("value supplied for undeclared slot `{0}`")]
    UndeclaredSlot(String),
    #[error("slot `{slot}` expects {expected}, got {found}")]
    SlotKindMismatch {
        slot: String,
        expected: String,
        found: String,
    },
    #[error("invalid value for slot `{slot}`: {detail}")]
    InvalidSlotValue { slot: String, detail: String },
    #[error("template `{template}`: {source}")]
    Template {
        template: String,
        #[source]
        source: Box<Error>,
    },
    #[error("no candidate templates")]
    NoCandidates,

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("{location}: {detail}")]
    Document { location: String, detail: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("snapshot is corrupt: {0}")]
    Corrupt(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateTreeId(_) => "duplicate_tree_id",
            Error::DuplicateConceptId(_) => "duplicate_concept_id",
            Error::MalformedHierarchy { .. } => "malformed_hierarchy",
            Error::InvalidTree { .. } => "invalid_tree",
            Error::TreeNotFound(_) => "tree_not_found",
            Error::ConceptNotFound(_) => "concept_not_found",
            Error::UserNotFound(_) => "user_not_found",
            Error::TemplateNotFound(_) => "template_not_found",
            Error::RelationKindNotFound(_) => "relation_kind_not_found",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::MissingTreeVector(_) => "missing_tree_vector",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroVector => "zero_vector",
            Error::NonFinite(_) => "non_finite",
            Error::OutOfRange { .. } => "out_of_range",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnknownLabel(_) => "unknown_label",
            Error::EmptyForest => "empty_forest",
            Error::NotTrained => "not_trained",
            Error::TemplateSyntax { .. } => "template_syntax",
            Error::UndeclaredSlotInText(_) => "undeclared_slot_in_text",
            Error::MissingSlot(_) => "missing_slot",
            Error::UndeclaredSlot(_) => "undeclared_slot",
            Error::SlotKindMismatch { .. } => "slot_kind_mismatch",
            Error::InvalidSlotValue { .. } => "invalid_slot_value",
            Error::Template { source, .. } => source.code(),
            Error::NoCandidates => "no_candidates",
            Error::Diverged { .. } => "diverged",
            Error::Document { .. } => "invalid_document",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Corrupt(_) => "corrupt_snapshot",
        }
    }

    /// True for lookups of an id that does not exist.
    pub fn is_not_found(&self) -> bool {
        match self {
            Error::TreeNotFound(_)
            | Error::ConceptNotFound(_)
            | Error::UserNotFound(_)
            | Error::TemplateNotFound(_) => true,
            Error::Template { source, .. } => source.is_not_found(),
            _ => false,
        }
    }

    pub(crate) fn out_of_range(name: &'static str, value: f64, range: &'static str) -> Self {
        Error::OutOfRange { name, value, range }
    }
}
