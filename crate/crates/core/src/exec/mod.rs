//! Execution-boundary enforcement primitives: the critical-node registry,
//! just-in-time privilege grants, the egress allowlist, trust tokens, and the
//! asynchronous validator used in optimistic mode. The kernel strings these
//! into the interception pipeline.

mod optimistic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optimistic::{AsyncValidator, PendingVerdict};

use crate::approval::{ApprovalDecision, ApprovalKind, ApprovalProvider, ApprovalRequest};
use crate::registry::{CapabilityBoundary, SemanticPermission};
use crate::session::{SessionToken, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CriticalNodeCategory {
    Financial,
    DataPersistence,
    PrivacyAccess,
    SystemIntegrity,
    NetworkEgress,
}

impl CriticalNodeCategory {
    pub const ALL: [CriticalNodeCategory; 5] = [
        CriticalNodeCategory::Financial,
        CriticalNodeCategory::DataPersistence,
        CriticalNodeCategory::PrivacyAccess,
        CriticalNodeCategory::SystemIntegrity,
        CriticalNodeCategory::NetworkEgress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriticalNodeCategory::Financial => "FINANCIAL",
            CriticalNodeCategory::DataPersistence => "DATA_PERSISTENCE",
            CriticalNodeCategory::PrivacyAccess => "PRIVACY_ACCESS",
            CriticalNodeCategory::SystemIntegrity => "SYSTEM_INTEGRITY",
            CriticalNodeCategory::NetworkEgress => "NETWORK_EGRESS",
        }
    }
}

impl fmt::Display for CriticalNodeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriticalNodeCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown critical-node category {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum RegistryFileError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_CRITICAL_NODES: &str = "\
# category: mock-API names
FINANCIAL: pay, transfer_funds, purchase
DATA_PERSISTENCE: write_note, create_event, set_alarm, save_file
PRIVACY_ACCESS: read_contacts, read_calendar, get_location, read_messages
SYSTEM_INTEGRITY: install_package, uninstall_package, modify_settings
NETWORK_EGRESS: send_message, send_mail, post_comment, book_ticket, open_url
";

/// Which mock APIs are critical nodes, and of which category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalNodeRegistry {
    apis: BTreeMap<String, CriticalNodeCategory>,
}

impl Default for CriticalNodeRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_CRITICAL_NODES).expect("default registry parses")
    }
}

impl CriticalNodeRegistry {
    /// `CATEGORY: api, api, ...` per line; `#` comments.
    pub fn parse(text: &str) -> Result<Self, RegistryFileError> {
        let mut apis = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| RegistryFileError::Syntax { line: i + 1, msg };
            let (cat, list) = line.split_once(':').ok_or_else(|| err("expected CATEGORY: apis".into()))?;
            let cat: CriticalNodeCategory = cat.trim().parse().map_err(err)?;
            for api in list.split(',').map(str::trim).filter(|a| !a.is_empty()) {
                if let Some(prev) = apis.insert(api.to_string(), cat) {
                    if prev != cat {
                        return Err(err(format!("{api} listed under {prev} and {cat}")));
                    }
                }
            }
        }
        Ok(Self { apis })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegistryFileError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn category(&self, api: &str) -> Option<CriticalNodeCategory> {
        self.apis.get(api).copied()
    }

    pub fn apis(&self) -> impl Iterator<Item = (&str, CriticalNodeCategory)> {
        self.apis.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// The candidate action with parameters resolved to text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub category: Option<CriticalNodeCategory>,
    pub api: String,
    pub params: BTreeMap<String, String>,
}

/// What the validator sees: the user's instruction, the justifications of
/// earlier steps, the candidate, and negative constraints declared by the
/// sources the candidate draws on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationContext {
    pub i_user: String,
    pub c_hist: Vec<String>,
    pub a_req: ActionRequest,
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EgressDecision {
    Proceed,
    BlockAndAlert,
}

/// Exact, case-insensitive hostname match against the allowlist.
pub fn egress_filter(s_max: &CapabilityBoundary, host: &str) -> EgressDecision {
    let host = host.to_ascii_lowercase();
    if s_max.domain_allowlist.contains(&host) {
        EgressDecision::Proceed
    } else {
        EgressDecision::BlockAndAlert
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "kebab-case")]
pub enum PrivilegeDecision {
    Granted,
    Blocked(String),
}

/// Session-scoped permission grants.
#[derive(Debug, Default)]
pub struct GrantTable {
    granted: Mutex<HashSet<(TokenId, SemanticPermission)>>,
}

impl GrantTable {
    /// Anything outside the token's ceiling is a policy violation. Inside it,
    /// the first use of each permission in a session asks the user.
    pub fn check_privilege(
        &self,
        token: &SessionToken,
        p_req: &BTreeSet<SemanticPermission>,
        approval: &dyn ApprovalProvider,
    ) -> PrivilegeDecision {
        if let Some(p) = p_req.iter().find(|p| !token.s_max.contains(**p)) {
            return PrivilegeDecision::Blocked(format!("policy: {} exceeds capability boundary", p.name()));
        }
        for p in p_req {
            if self.granted.lock().contains(&(token.token_id, *p)) {
                continue;
            }
            let req = ApprovalRequest {
                kind: ApprovalKind::Permission,
                subject: p.name().to_string(),
                card: format!("{} requests {} for this session", token.principal, p.name()),
            };
            match approval.decide(&req) {
                Ok(ApprovalDecision::Approve) => {
                    self.granted.lock().insert((token.token_id, *p));
                }
                Ok(_) => return PrivilegeDecision::Blocked(format!("user declined {}", p.name())),
                Err(e) => return PrivilegeDecision::Blocked(e.to_string()),
            }
        }
        PrivilegeDecision::Granted
    }

    pub fn granted(&self, token: TokenId) -> BTreeSet<SemanticPermission> {
        self.granted
            .lock()
            .iter()
            .filter(|(t, _)| *t == token)
            .map(|(_, p)| *p)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrustStatus {
    Live,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustToken {
    pub session: TokenId,
    pub op_category: CriticalNodeCategory,
    /// Audit record of the synchronous pass that minted it.
    pub issued_after: u64,
    pub status: TrustStatus,
}

#[derive(Debug, Default)]
pub struct TrustTokenStore {
    tokens: Mutex<Vec<TrustToken>>,
}

impl TrustTokenStore {
    pub fn is_live(&self, session: TokenId, cat: CriticalNodeCategory) -> bool {
        self.tokens
            .lock()
            .iter()
            .any(|t| t.session == session && t.op_category == cat && t.status == TrustStatus::Live)
    }

    /// Mints a token unless one is already live.
    pub fn mint(&self, session: TokenId, cat: CriticalNodeCategory, record: u64) -> bool {
        if self.is_live(session, cat) {
            return false;
        }
        self.tokens.lock().push(TrustToken {
            session,
            op_category: cat,
            issued_after: record,
            status: TrustStatus::Live,
        });
        true
    }

    pub fn revoke(&self, session: TokenId, cat: CriticalNodeCategory) -> bool {
        let mut hit = false;
        for t in self.tokens.lock().iter_mut() {
            if t.session == session && t.op_category == cat && t.status == TrustStatus::Live {
                t.status = TrustStatus::Revoked;
                hit = true;
            }
        }
        hit
    }

    pub fn all(&self) -> Vec<TrustToken> {
        self.tokens.lock().clone()
    }
}
