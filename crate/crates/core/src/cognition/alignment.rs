use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::memory::{CellId, CognitionError, MemoryStore};
use crate::exec::CriticalNodeCategory;
use crate::platform::{hash, Digest};
use crate::registry::SemanticPermission;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Critical(CriticalNodeCategory),
    Benign,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedAction {
    /// Mock-API name, e.g. `send_message`.
    pub api: String,
    pub op_kind: OpKind,
    pub params: BTreeMap<String, CellId>,
    pub justification: String,
    pub requires_user_visible_justification: bool,
    /// Permissions this step needs, declared by the planner.
    pub p_req: BTreeSet<SemanticPermission>,
    /// Destination host for network egress.
    pub host: Option<String>,
}

impl PlannedAction {
    pub fn new(api: &str, op_kind: OpKind) -> Self {
        Self {
            api: api.to_string(),
            op_kind,
            params: BTreeMap::new(),
            justification: String::new(),
            requires_user_visible_justification: matches!(op_kind, OpKind::Critical(_)),
            p_req: BTreeSet::new(),
            host: None,
        }
    }

    pub fn with_params(mut self, params: impl IntoIterator<Item = (String, CellId)>) -> Self {
        self.params.extend(params);
        self
    }

    pub fn justified(mut self, why: &str) -> Self {
        self.justification = why.to_string();
        self
    }

    pub fn needs(mut self, perms: impl IntoIterator<Item = SemanticPermission>) -> Self {
        self.p_req.extend(perms);
        self
    }

    pub fn to_host(mut self, host: &str) -> Self {
        self.host = Some(host.to_string());
        self
    }

    pub fn category(&self) -> Option<CriticalNodeCategory> {
        match self.op_kind {
            OpKind::Critical(c) => Some(c),
            OpKind::Benign => None,
        }
    }
}

/// The user's instruction and the actions taken towards it so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_instruction: String,
    pub goal_anchor: Digest,
    actions: Vec<PlannedAction>,
}

impl Trajectory {
    pub fn new(user_instruction: &str) -> Self {
        Self {
            user_instruction: user_instruction.to_string(),
            goal_anchor: hash(user_instruction.as_bytes()),
            actions: Vec::new(),
        }
    }

    pub fn push(&mut self, a: PlannedAction) {
        self.actions.push(a);
    }

    pub fn actions(&self) -> &[PlannedAction] {
        &self.actions
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "kebab-case")]
pub enum AlignmentVerdict {
    Consistent,
    Drift(String),
    MissingJustification,
}

pub trait DriftDetector: Send + Sync {
    /// `param_texts` are the resolved contents of the candidate's parameters.
    fn drift(&self, traj: &Trajectory, candidate: &PlannedAction, param_texts: &[String]) -> Option<String>;
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "from", "that", "this", "are", "was", "you", "your", "our", "can", "will", "please",
    "into", "onto", "about", "then", "them", "have", "has", "not", "but", "all", "any", "its", "out", "get", "set",
    "new", "now", "via", "per",
];

/// Lowercase alphanumeric tokens of three or more characters, minus stopwords.
pub fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3)
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Flags a candidate that shares no content word with the instruction and
/// earlier justifications.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeywordOverlap;

impl DriftDetector for KeywordOverlap {
    fn drift(&self, traj: &Trajectory, candidate: &PlannedAction, param_texts: &[String]) -> Option<String> {
        let mut reference = content_words(&traj.user_instruction);
        for a in traj.actions() {
            reference.extend(content_words(&a.justification));
        }
        let mut cand = content_words(&candidate.api.replace('_', " "));
        for t in param_texts {
            cand.extend(content_words(t));
        }
        if cand.is_disjoint(&reference) {
            Some(format!("{} shares no terms with the user's goal", candidate.api))
        } else {
            None
        }
    }
}

pub fn check_alignment(
    traj: &Trajectory,
    candidate: &PlannedAction,
    memory: &MemoryStore,
    detector: &dyn DriftDetector,
) -> Result<AlignmentVerdict, CognitionError> {
    let needs_why = matches!(candidate.op_kind, OpKind::Critical(_)) || candidate.requires_user_visible_justification;
    if needs_why && candidate.justification.trim().is_empty() {
        return Ok(AlignmentVerdict::MissingJustification);
    }
    let texts = candidate
        .params
        .values()
        .map(|id| memory.read(*id).map(|c| c.content))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match detector.drift(traj, candidate, &texts) {
        Some(r) => AlignmentVerdict::Drift(r),
        None => AlignmentVerdict::Consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cognition::Source;
    use crate::platform::{BootImages, ExpectedMeasurements, Platform};
    use std::sync::Arc;

    fn memory() -> MemoryStore {
        let p = Platform::new(8);
        let img = BootImages::reference();
        p.secure_boot(&img, &ExpectedMeasurements::from_images(&img));
        MemoryStore::new(Arc::new(p)).unwrap()
    }

    #[test]
    fn unjustified_install_is_missing_justification() {
        let m = memory();
        let t = Trajectory::new("book a train ticket");
        let a = PlannedAction::new("install_package", OpKind::Critical(CriticalNodeCategory::SystemIntegrity));
        assert_eq!(check_alignment(&t, &a, &m, &KeywordOverlap).unwrap(), AlignmentVerdict::MissingJustification);
    }

    #[test]
    fn justified_payment_is_consistent() {
        let m = memory();
        let item = m.store("ICE 577 train ticket Berlin to Munich", Source::User).unwrap().cell_id;
        let t = Trajectory::new("book a train ticket to Munich");
        let a = PlannedAction::new("pay", OpKind::Critical(CriticalNodeCategory::Financial))
            .with_params([("item".to_string(), item)])
            .justified("pay for the train ticket the user asked to book");
        assert_eq!(check_alignment(&t, &a, &m, &KeywordOverlap).unwrap(), AlignmentVerdict::Consistent);
    }

    #[test]
    fn disjoint_words_drift_matches_set_oracle() {
        let m = memory();
        let p = m.store("free-gems.example apk", Source::User).unwrap().cell_id;
        let t = Trajectory::new("book a train ticket");
        let a = PlannedAction::new("install_package", OpKind::Critical(CriticalNodeCategory::SystemIntegrity))
            .with_params([("pkg".to_string(), p)])
            .justified("needed");
        let cand: BTreeSet<String> = ["install", "package", "free", "gems", "example", "apk"].map(String::from).into();
        let reference: BTreeSet<String> = ["book", "train", "ticket"].map(String::from).into();
        assert!(cand.is_disjoint(&reference));
        assert!(matches!(check_alignment(&t, &a, &m, &KeywordOverlap).unwrap(), AlignmentVerdict::Drift(_)));
    }

    #[test]
    fn content_word_rules() {
        assert_eq!(
            content_words("Set an ALARM for 07:00, please"),
            ["alarm"].map(String::from).into_iter().collect()
        );
    }
}
