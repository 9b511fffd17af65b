//! The pluggable reasoning boundary. Every LLM-shaped role (planner, action
//! judge, intent judge, entity recognizer) sits behind [`SemanticJudge`];
//! the defaults are deterministic rule engines and a fixture replayer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{CriticalNodeCategory, VerificationContext};
use crate::firewall::{normalize, PromptContext, Recognizer, SegmentTag, SensitiveEntity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JudgeRole {
    Planner,
    ActionJudge,
    IntentJudge,
    Recognizer,
}

impl JudgeRole {
    pub const ALL: [JudgeRole; 4] = [
        JudgeRole::Planner,
        JudgeRole::ActionJudge,
        JudgeRole::IntentJudge,
        JudgeRole::Recognizer,
    ];

    pub fn key(self) -> &'static str {
        match self {
            JudgeRole::Planner => "planner",
            JudgeRole::ActionJudge => "action_judge",
            JudgeRole::IntentJudge => "intent_judge",
            JudgeRole::Recognizer => "recognizer",
        }
    }
}

impl fmt::Display for JudgeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Queries carry firewall-built structures only; there is no raw-string variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum JudgeContext {
    Prompt(PromptContext),
    Verification(VerificationContext),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JudgeQuery {
    pub role: JudgeRole,
    pub context: JudgeContext,
    pub options: BTreeMap<String, String>,
}

impl JudgeQuery {
    pub fn new(role: JudgeRole, context: JudgeContext) -> Self {
        Self {
            role,
            context,
            options: BTreeMap::new(),
        }
    }

    /// Fixture lookup keys, most specific first.
    pub fn keys(&self) -> Vec<String> {
        let role = self.role.key();
        match &self.context {
            JudgeContext::Prompt(p) => vec![format!("{role}:{}", normalize(p.body(SegmentTag::User).unwrap_or("")))],
            JudgeContext::Verification(v) => {
                let params: Vec<String> = v
                    .a_req
                    .params
                    .iter()
                    .map(|(k, val)| format!("{k}={}", normalize(val)))
                    .collect();
                vec![
                    format!("{role}:{}:{}", v.a_req.api, params.join(";")),
                    format!("{role}:{}", v.a_req.api),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JudgeDecision {
    DirectPass,
    UserConfirmationRequired,
    Allow,
    Reject,
    Proceed,
    Halt,
    Entities(Vec<SensitiveEntity>),
}

impl JudgeDecision {
    /// Whether this decision belongs to the role's closed set.
    pub fn valid_for(&self, role: JudgeRole) -> bool {
        matches!(
            (role, self),
            (JudgeRole::ActionJudge, JudgeDecision::DirectPass | JudgeDecision::UserConfirmationRequired)
                | (JudgeRole::IntentJudge, JudgeDecision::Allow | JudgeDecision::Reject)
                | (JudgeRole::Planner, JudgeDecision::Proceed | JudgeDecision::Halt)
                | (JudgeRole::Recognizer, JudgeDecision::Entities(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub decision: JudgeDecision,
    #[serde(default)]
    pub rationale: String,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

impl JudgeVerdict {
    pub fn rule(decision: JudgeDecision, rationale: impl Into<String>) -> Self {
        Self {
            decision,
            rationale: rationale.into(),
            confidence: 1.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("{role} judge returned out-of-set decision {decision}")]
    InvalidDecision { role: JudgeRole, decision: String },
}

pub trait SemanticJudge: Send + Sync {
    fn judge(&self, q: &JudgeQuery) -> Result<JudgeVerdict, JudgeError>;
}

/// Role-indexed judges. Validates every verdict against its role's closed set.
#[derive(Default, Clone)]
pub struct JudgeRegistry {
    judges: HashMap<JudgeRole, Arc<dyn SemanticJudge>>,
    calls: Arc<AtomicU64>,
}

impl JudgeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rule judges for every role.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        let rule: Arc<dyn SemanticJudge> = Arc::new(RuleJudge::default());
        for role in JudgeRole::ALL {
            r.register(role, rule.clone());
        }
        r
    }

    pub fn register(&mut self, role: JudgeRole, judge: Arc<dyn SemanticJudge>) -> &mut Self {
        self.judges.insert(role, judge);
        self
    }

    pub fn is_registered(&self, role: JudgeRole) -> bool {
        self.judges.contains_key(&role)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn judge(&self, q: &JudgeQuery) -> Result<JudgeVerdict, JudgeError> {
        let j = self
            .judges
            .get(&q.role)
            .ok_or_else(|| JudgeError::Unavailable(format!("no {} judge registered", q.role)))?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = j.judge(q)?;
        if !v.decision.valid_for(q.role) {
            return Err(JudgeError::InvalidDecision {
                role: q.role,
                decision: format!("{:?}", v.decision),
            });
        }
        Ok(v)
    }
}

/// Passcode-like constraint subjects: "do not include Password" forbids any
/// passcode entity, not just the word.
const SECRET_WORDS: &[&str] = &["password", "passcode", "pin", "code", "otp", "credentials"];

/// Deterministic default judge.
///
/// Action judge: FINANCIAL and SYSTEM_INTEGRITY always need confirmation;
/// so does any outbound parameter that violates a source-declared
/// "do not include X" constraint. Intent judge allows; planner proceeds;
/// recognizer runs the dictionary recognizer over the user segment.
#[derive(Default)]
pub struct RuleJudge {
    recognizer: crate::firewall::DictionaryRecognizer,
}

impl RuleJudge {
    pub const CONFIRM_CATEGORIES: [CriticalNodeCategory; 2] =
        [CriticalNodeCategory::Financial, CriticalNodeCategory::SystemIntegrity];

    /// Returns the first violated constraint, if any.
    pub fn violated_constraint(&self, v: &VerificationContext) -> Option<String> {
        for c in &v.constraints {
            let term = normalize(c);
            let secret = SECRET_WORDS.iter().any(|w| term.split(' ').any(|t| t == *w));
            for text in v.a_req.params.values() {
                let hit = if secret {
                    self.recognizer
                        .recognize(text)
                        .iter()
                        .any(|e| e.kind == crate::firewall::EntityKind::Passcode)
                } else {
                    normalize(text).contains(&term)
                };
                if hit {
                    return Some(c.clone());
                }
            }
        }
        None
    }
}

impl SemanticJudge for RuleJudge {
    fn judge(&self, q: &JudgeQuery) -> Result<JudgeVerdict, JudgeError> {
        Ok(match (q.role, &q.context) {
            (JudgeRole::ActionJudge, JudgeContext::Verification(v)) => {
                if let Some(cat) = v.a_req.category.filter(|c| Self::CONFIRM_CATEGORIES.contains(c)) {
                    JudgeVerdict::rule(JudgeDecision::UserConfirmationRequired, format!("{} is high risk", cat.name()))
                } else if let Some(c) = self.violated_constraint(v) {
                    JudgeVerdict::rule(
                        JudgeDecision::UserConfirmationRequired,
                        format!("outbound content violates source constraint \"do not include {c}\""),
                    )
                } else {
                    JudgeVerdict::rule(JudgeDecision::DirectPass, "consistent with user intent")
                }
            }
            (JudgeRole::IntentJudge, _) => JudgeVerdict::rule(JudgeDecision::Allow, "no rule matched"),
            (JudgeRole::Planner, _) => JudgeVerdict::rule(JudgeDecision::Proceed, "scripted plan"),
            (JudgeRole::Recognizer, JudgeContext::Prompt(p)) => JudgeVerdict::rule(
                JudgeDecision::Entities(self.recognizer.recognize(p.body(SegmentTag::User).unwrap_or(""))),
                "dictionary",
            ),
            (role, _) => return Err(JudgeError::Unavailable(format!("{role} cannot judge this context"))),
        })
    }
}

/// Replays recorded verdicts keyed by [`JudgeQuery::keys`]. Unknown keys go
/// to the fallback judge, or are unavailable without one.
pub struct FixtureJudge {
    fixtures: BTreeMap<String, JudgeVerdict>,
    fallback: Option<Arc<dyn SemanticJudge>>,
}

impl FixtureJudge {
    pub fn new(fixtures: BTreeMap<String, JudgeVerdict>) -> Self {
        Self {
            fixtures,
            fallback: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn with_fallback(mut self, j: Arc<dyn SemanticJudge>) -> Self {
        self.fallback = Some(j);
        self
    }
}

impl SemanticJudge for FixtureJudge {
    fn judge(&self, q: &JudgeQuery) -> Result<JudgeVerdict, JudgeError> {
        let keys = q.keys();
        if let Some(v) = keys.iter().find_map(|k| self.fixtures.get(k)) {
            return Ok(v.clone());
        }
        match &self.fallback {
            Some(f) => f.judge(q),
            None => Err(JudgeError::Unavailable(format!("no fixture for {}", keys[0]))),
        }
    }
}

/// A judge that always errors.
pub struct FailingJudge;

impl SemanticJudge for FailingJudge {
    fn judge(&self, _: &JudgeQuery) -> Result<JudgeVerdict, JudgeError> {
        Err(JudgeError::Unavailable("judge offline".into()))
    }
}

/// Bounds an external judge with a per-query timeout.
pub struct TimeoutJudge {
    inner: Arc<dyn SemanticJudge>,
    timeout: Duration,
}

impl TimeoutJudge {
    pub fn new(inner: Arc<dyn SemanticJudge>, timeout: Duration) -> Self {
        Self { inner, timeout }
    }
}

impl SemanticJudge for TimeoutJudge {
    fn judge(&self, q: &JudgeQuery) -> Result<JudgeVerdict, JudgeError> {
        let (tx, rx) = mpsc::channel();
        let inner = self.inner.clone();
        let q = q.clone();
        std::thread::spawn(move || {
            let _ = tx.send(inner.judge(&q));
        });
        rx.recv_timeout(self.timeout)
            .unwrap_or_else(|_| Err(JudgeError::Unavailable(format!("timed out after {:?}", self.timeout))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ActionRequest;
    use crate::firewall::{build_context, REINFORCE_DIRECTIVE};

    fn vctx(category: Option<CriticalNodeCategory>, api: &str, params: &[(&str, &str)], constraints: &[&str]) -> JudgeQuery {
        JudgeQuery::new(
            JudgeRole::ActionJudge,
            JudgeContext::Verification(VerificationContext {
                i_user: "forward the memo to Bob".into(),
                c_hist: vec![],
                a_req: ActionRequest {
                    category,
                    api: api.into(),
                    params: params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                },
                constraints: constraints.iter().map(|s| s.to_string()).collect(),
            }),
        )
    }

    #[test]
    fn risk_table_sweep() {
        let reg = JudgeRegistry::with_defaults();
        for cat in CriticalNodeCategory::ALL {
            let v = reg.judge(&vctx(Some(cat), "x", &[], &[])).unwrap();
            let expect = if RuleJudge::CONFIRM_CATEGORIES.contains(&cat) {
                JudgeDecision::UserConfirmationRequired
            } else {
                JudgeDecision::DirectPass
            };
            assert_eq!(v.decision, expect, "{cat:?}");
            assert_eq!(v.confidence, 1.0);
        }
    }

    #[test]
    fn negative_constraint() {
        let reg = JudgeRegistry::with_defaults();
        let q = vctx(
            Some(CriticalNodeCategory::NetworkEgress),
            "send_message",
            &[("body", "Wifi notes. Password: hunter22")],
            &["Password"],
        );
        assert_eq!(reg.judge(&q).unwrap().decision, JudgeDecision::UserConfirmationRequired);
        let q = vctx(Some(CriticalNodeCategory::NetworkEgress), "send_message", &[("body", "Wifi notes")], &["Password"]);
        assert_eq!(reg.judge(&q).unwrap().decision, JudgeDecision::DirectPass);
        let q = vctx(None, "send_message", &[("body", "the Budget is 5k")], &["budget"]);
        assert_eq!(reg.judge(&q).unwrap().decision, JudgeDecision::UserConfirmationRequired);
    }

    #[test]
    fn fixture_replay_and_fallback() {
        let f = FixtureJudge::from_json(
            r#"{"action_judge:read_contacts:query=mom": {"decision": "USER_CONFIRMATION_REQUIRED", "rationale": "r", "confidence": 0.4}}"#,
        )
        .unwrap();
        let q = vctx(Some(CriticalNodeCategory::PrivacyAccess), "read_contacts", &[("query", "Mom")], &[]);
        let v = f.judge(&q).unwrap();
        assert_eq!(v.decision, JudgeDecision::UserConfirmationRequired);
        assert_eq!(v.confidence, 0.4);
        let other = vctx(Some(CriticalNodeCategory::PrivacyAccess), "read_contacts", &[("query", "Dad")], &[]);
        assert!(f.judge(&other).is_err());
        let f = f.with_fallback(Arc::new(RuleJudge::default()));
        assert_eq!(f.judge(&other).unwrap().decision, JudgeDecision::DirectPass);
    }

    #[test]
    fn unregistered_role_and_out_of_set_decisions() {
        let reg = JudgeRegistry::new();
        assert!(matches!(
            reg.judge(&vctx(None, "x", &[], &[])),
            Err(JudgeError::Unavailable(_))
        ));
        let mut reg = JudgeRegistry::new();
        let bad = FixtureJudge::from_json(r#"{"action_judge:x": {"decision": "ALLOW"}}"#).unwrap();
        reg.register(JudgeRole::ActionJudge, Arc::new(bad));
        assert!(matches!(
            reg.judge(&vctx(None, "x", &[], &[])),
            Err(JudgeError::InvalidDecision { .. })
        ));
    }

    #[test]
    fn recognizer_and_timeout() {
        let ctx = build_context("s", "my pin is 4821", &[], &[], REINFORCE_DIRECTIVE, &[]);
        let reg = JudgeRegistry::with_defaults();
        let v = reg
            .judge(&JudgeQuery::new(JudgeRole::Recognizer, JudgeContext::Prompt(ctx.clone())))
            .unwrap();
        assert!(matches!(v.decision, JudgeDecision::Entities(ref e) if e.len() == 1));

        struct Slow;
        impl SemanticJudge for Slow {
            fn judge(&self, _: &JudgeQuery) -> Result<JudgeVerdict, JudgeError> {
                std::thread::sleep(Duration::from_millis(300));
                Ok(JudgeVerdict::rule(JudgeDecision::Allow, ""))
            }
        }
        let t = TimeoutJudge::new(Arc::new(Slow), Duration::from_millis(20));
        assert!(t
            .judge(&JudgeQuery::new(JudgeRole::IntentJudge, JudgeContext::Prompt(ctx)))
            .is_err());
    }
}
