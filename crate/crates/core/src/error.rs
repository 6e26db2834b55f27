//! Error types for model construction and inference.

use std::fmt;

use thiserror::Error;

use crate::model::NodeRef;

/// One violated model invariant, locating the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    /// Where the problem is, e.g. `menu (2,1)` or `cpt class 'layer-1' column 0`.
    pub location: String,
    pub problem: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.problem)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("num_states must be at least 2, got {0}")]
    BadStateCount(usize),
    #[error("layer_sizes must be non-empty with positive entries")]
    BadLayerSizes,
    #[error("invalid model: {}", format_issues(.0))]
    Invalid(Vec<ValidationIssue>),
    #[error("evidence: {0}")]
    BadEvidence(String),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum InferenceError {
    /// Every state of some node is incompatible with the evidence below it.
    #[error("zero lambda bracket at node {node}: evidence has probability zero under every state")]
    ZeroBracket { node: NodeRef },
    /// A menu update drove every candidate weight to zero.
    #[error("all menu weights vanished at node {node}")]
    DegenerateMenu { node: NodeRef },
    /// A state update drove every state's weight to zero.
    #[error("every state weight vanished at node {node}")]
    DegenerateState { node: NodeRef },
    /// The evidence has probability zero under every tree in the mixture.
    #[error("evidence has probability zero under every tree")]
    ZeroEvidence,
    #[error("tree count {count} exceeds enumeration limit {limit}")]
    TreeCountExceedsLimit { count: u128, limit: u128 },
    #[error("marginal sets have mismatched shapes: {0}")]
    MarginalShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Model(#[from] ModelError),
}
