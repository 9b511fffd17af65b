//! Scenario files: TOML documents with `id`, `kind`, `setup`, `instruction`,
//! `steps`, `adversary` and `expected`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use aura_core::approval::ApprovalScript;
use aura_core::kernel::Stage;
use aura_core::registry::{AppCategory, SemanticPermission};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{AppState, Item};

pub const DEFAULT_BUDGET: u64 = 200;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error("unknown adversary move {0:?}")]
    UnknownMove(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Benign,
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    TaskSuccess,
    AttackBlockedAt(Stage),
}

impl FromStr for Expected {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "task_success" => Ok(Expected::TaskSuccess),
            Some(("attack_blocked_at", st)) => st.parse().map(Expected::AttackBlockedAt),
            _ => Err(format!("bad expected verdict {s:?}")),
        }
    }
}

impl fmt::Display for Expected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expected::TaskSuccess => f.write_str("task_success"),
            Expected::AttackBlockedAt(s) => write!(f, "attack_blocked_at:{}", s.name()),
        }
    }
}

impl Serialize for Expected {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expected {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: String,
    pub display_name: String,
    pub category: String,
    #[serde(default)]
    pub permissions: Vec<SemanticPermission>,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub host: Option<String>,
    /// Content-policy lexicon for the app agent's guardrail.
    #[serde(default)]
    pub refusal_policy: Vec<String>,
    /// A counterfeit of `impersonates`: same display name, stolen card.
    #[serde(default)]
    pub impersonates: Option<String>,
    #[serde(default)]
    pub state: AppState,
}

impl AppSpec {
    pub fn category(&self) -> Result<AppCategory, ScenarioError> {
        self.category
            .parse()
            .map_err(|_| ScenarioError::Invalid(format!("app {}: unknown category {}", self.name, self.category)))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    pub apps: Vec<AppSpec>,
}

/// Where an action parameter's value comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSrc {
    /// The SA's own (verified) text.
    Lit(String),
    /// A labelled observation, as received.
    Cell(String),
    /// Text derived from a labelled observation (inherits its taint).
    Quote { from: String, prefix: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Hand a task to an app agent.
    Invoke { app: String, task: String },
    /// Benign read of an app collection, kept under `label`.
    Read {
        app: String,
        api: String,
        collection: String,
        #[serde(default)]
        id: Option<String>,
        label: String,
    },
    /// A state-changing call.
    Act {
        app: String,
        api: String,
        #[serde(default)]
        params: BTreeMap<String, ParamSrc>,
        #[serde(default)]
        host: Option<String>,
        justification: String,
        #[serde(default)]
        needs: Vec<SemanticPermission>,
    },
    /// Ask the on-device generator to continue a labelled text.
    Generate { from: String, prompt: String, label: String },
    /// Open every link found in a labelled observation via `app`.
    FollowLinks { app: String, from: String },
}

impl Step {
    pub fn app(&self) -> Option<&str> {
        match self {
            Step::Invoke { app, .. } | Step::Read { app, .. } | Step::Act { app, .. } | Step::FollowLinks { app, .. } => {
                Some(app)
            }
            Step::Generate { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    ForgedEnvelope,
    FakeObservation,
    BlacklistEvasionText,
    TaintedSourceWrite,
    EndorsementTarget,
}

impl FromStr for MoveKind {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| ScenarioError::UnknownMove(s.into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryMove {
    /// Applied just before step `at` (0-based).
    pub at: usize,
    #[serde(rename = "move")]
    pub kind: String,
    pub app: String,
    #[serde(default)]
    pub collection: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
    pub payload: String,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Label under which an injected observation lands, if accepted.
    #[serde(default)]
    pub label: Option<String>,
}

impl AdversaryMove {
    pub fn move_kind(&self) -> Result<MoveKind, ScenarioError> {
        self.kind.parse()
    }
}

/// A condition on the final world state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    #[serde(default)]
    pub app: Option<String>,
    #[serde(default)]
    pub collection: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub contains: Option<String>,
    /// Any bytes delivered to this mock endpoint.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Data captured by adversary code.
    #[serde(default)]
    pub loot: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub description: String,
    pub instruction: String,
    pub expected: Expected,
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub approvals: Option<ApprovalScript>,
    pub setup: Setup,
    #[serde(default)]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub adversary: Vec<AdversaryMove>,
    /// All must hold for the task to count as done.
    #[serde(default)]
    pub goal: Vec<Predicate>,
    /// All must hold for the attack to count as landed.
    #[serde(default)]
    pub attack: Vec<Predicate>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Invalid(e.message().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn budget(&self) -> u64 {
        self.budget.unwrap_or(DEFAULT_BUDGET)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(format!("{}: {m}", self.id)));
        if self.id.is_empty() {
            return bad("empty id".into());
        }
        let mut apps = BTreeSet::new();
        for a in &self.setup.apps {
            a.category()?;
            if !apps.insert(a.name.as_str()) {
                return bad(format!("duplicate app {}", a.name));
            }
            if let Some(t) = &a.impersonates {
                if !self.setup.apps.iter().any(|g| &g.name == t && g.impersonates.is_none()) {
                    return bad(format!("{} impersonates unknown app {t}", a.name));
                }
            }
        }
        for m in &self.adversary {
            m.move_kind()?;
            if !apps.contains(m.app.as_str()) {
                return bad(format!("adversary move targets unknown app {}", m.app));
            }
            if m.at > self.steps.len() {
                return bad(format!("adversary move at {} past the last step", m.at));
            }
        }
        for s in &self.steps {
            if let Some(a) = s.app() {
                if !apps.contains(a) {
                    return bad(format!("step uses unknown app {a}"));
                }
            }
        }
        let (preds, what) = match self.kind {
            ScenarioKind::Benign => (&self.goal, "goal"),
            ScenarioKind::Attack => (&self.attack, "attack"),
        };
        if preds.is_empty() {
            return bad(format!("{} scenario needs a {what} predicate", what));
        }
        for p in self.goal.iter().chain(&self.attack) {
            let state = p.app.is_some() && p.collection.is_some();
            if !(state || p.endpoint.is_some() || p.loot.is_some()) {
                return bad("predicate needs app+collection, endpoint or loot".into());
            }
        }
        match (self.kind, self.expected) {
            (ScenarioKind::Benign, Expected::TaskSuccess) | (ScenarioKind::Attack, Expected::AttackBlockedAt(_)) => Ok(()),
            _ => bad(format!("expected {} does not fit a {:?} scenario", self.expected, self.kind)),
        }
    }
}

macro_rules! shipped {
    ($($f:literal),* $(,)?) => {
        &[$(($f, include_str!(concat!("../scenarios/", $f, ".toml")))),*]
    };
}

const SHIPPED: &[(&str, &str)] = shipped![
    "fake_app",
    "overlay_phishing",
    "sensitive_forwarding",
    "memo_completion",
    "passcode_pivoting",
    "hate_speech",
    "send_message",
    "train_booking",
    "set_alarm",
    "write_note",
    "calendar_event",
    "send_mail",
    "share_memo",
    "benign_comment",
];

/// The scenario suite shipped with the simulator (6 attack, 8 benign).
pub fn shipped() -> Vec<Scenario> {
    SHIPPED
        .iter()
        .map(|(name, text)| Scenario::parse(text).unwrap_or_else(|e| panic!("shipped scenario {name}: {e}")))
        .collect()
}

pub fn shipped_by_kind(kind: ScenarioKind) -> Vec<Scenario> {
    shipped().into_iter().filter(|s| s.kind == kind).collect()
}

/// Helper for building items in code.
pub fn item(id: &str, text: &str) -> Item {
    Item {
        id: id.into(),
        text: text.into(),
        tags: Vec::new(),
    }
}
