//! Report-valued validation results shared by the taxonomy, mapping and
//! proposer checks.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingCode {
    DuplicateId,
    OrphanParent,
    UnknownAnchor,
    AnchoredNonLeaf,
    EmptyDefinition,
    DepthExceeded,
    NegativeWeight,
    NonFiniteWeight,
    RowSum,
    SparsityCap,
    EmptyRow,
    UnknownSubdimension,
    SplitParentWeight,
    DuplicateItem,
    OutcomeMapped,
    ControlNotPure,
    StaleTaxonomyVersion,
    Renormalized,
    UnknownItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub code: FindingCode,
    /// Item or subdimension the finding is about.
    pub subject: String,
    pub message: String,
}

impl Finding {
    pub fn new(code: FindingCode, subject: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code,
            subject: subject.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({}): {}", self.code, self.subject, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn push(&mut self, finding: Finding) {
        self.findings.push(finding);
    }

    pub fn has(&self, code: FindingCode) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    pub fn with_code(&self, code: FindingCode) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(move |f| f.code == code)
    }
}
