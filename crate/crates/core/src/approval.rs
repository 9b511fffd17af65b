//! Human-in-the-loop decisions, scripted for tests or read from a terminal.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApprovalKind {
    /// Outgoing text with sensitive entities.
    Sensitive,
    /// Stripping taint from a memory cell.
    Declassify,
    /// First use of a permission in a session.
    Permission,
    /// Validator asked for confirmation of a critical action.
    Action,
    /// Plan drifted from the user's goal.
    Alignment,
    /// An app agent's guardrail was unsure.
    Escalation,
}

impl ApprovalKind {
    pub fn name(self) -> &'static str {
        match self {
            ApprovalKind::Sensitive => "sensitive",
            ApprovalKind::Declassify => "declassify",
            ApprovalKind::Permission => "permission",
            ApprovalKind::Action => "action",
            ApprovalKind::Alignment => "alignment",
            ApprovalKind::Escalation => "escalation",
        }
    }
}

impl fmt::Display for ApprovalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub kind: ApprovalKind,
    pub subject: String,
    /// What the user is shown.
    pub card: String,
}

impl ApprovalRequest {
    /// `kind:subject`, the key scripted decisions are looked up by.
    pub fn prompt_id(&self) -> String {
        format!("{}:{}", self.kind, self.subject)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApprovalDecision {
    Approve,
    Deny,
    /// Only meaningful for sensitive-entity prompts; elsewhere it counts as a denial.
    Redact,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApprovalError {
    #[error("no approval available for {0}")]
    Unavailable(String),
    #[error("approval script: {0}")]
    Script(String),
}

pub trait ApprovalProvider: Send + Sync {
    fn decide(&self, req: &ApprovalRequest) -> Result<ApprovalDecision, ApprovalError>;
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ApprovalScript {
    #[serde(default)]
    pub default: Option<ApprovalDecision>,
    /// Keys are prompt ids (`kind:subject`) or bare kinds.
    #[serde(default)]
    pub prompts: BTreeMap<String, ApprovalDecision>,
}

/// Answers from a decision table: exact prompt id, then kind, then default.
/// Anything else is unavailable. Every prompt is logged.
#[derive(Debug, Default)]
pub struct ScriptedApproval {
    script: ApprovalScript,
    log: Mutex<Vec<(String, Option<ApprovalDecision>)>>,
}

impl ScriptedApproval {
    pub fn new(script: ApprovalScript) -> Self {
        Self {
            script,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_default(d: ApprovalDecision) -> Self {
        Self::new(ApprovalScript {
            default: Some(d),
            prompts: BTreeMap::new(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ApprovalError> {
        serde_json::from_str(text)
            .map(Self::new)
            .map_err(|e| ApprovalError::Script(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ApprovalError> {
        let text = std::fs::read_to_string(path).map_err(|e| ApprovalError::Script(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn prompts(&self) -> Vec<(String, Option<ApprovalDecision>)> {
        self.log.lock().clone()
    }

    pub fn prompt_count(&self) -> usize {
        self.log.lock().len()
    }
}

impl ApprovalProvider for ScriptedApproval {
    fn decide(&self, req: &ApprovalRequest) -> Result<ApprovalDecision, ApprovalError> {
        let id = req.prompt_id();
        let d = self
            .script
            .prompts
            .get(&id)
            .or_else(|| self.script.prompts.get(req.kind.name()))
            .copied()
            .or(self.script.default);
        self.log.lock().push((id.clone(), d));
        d.ok_or(ApprovalError::Unavailable(id))
    }
}

/// Shows the confirmation card and reads `y`, `n` or `r` (redact).
pub struct InteractiveApproval<R, W> {
    io: Mutex<(R, W)>,
}

impl<R: BufRead + Send, W: Write + Send> InteractiveApproval<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self {
            io: Mutex::new((input, output)),
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> ApprovalProvider for InteractiveApproval<R, W> {
    fn decide(&self, req: &ApprovalRequest) -> Result<ApprovalDecision, ApprovalError> {
        let mut io = self.io.lock();
        let (input, output) = &mut *io;
        let unavailable = |_| ApprovalError::Unavailable(req.prompt_id());
        writeln!(output, "\n[{}] {}\n  {}", req.kind, req.subject, req.card).map_err(unavailable)?;
        loop {
            write!(output, "  approve? [y/n/r] ").map_err(unavailable)?;
            output.flush().map_err(unavailable)?;
            let mut line = String::new();
            if input.read_line(&mut line).map_err(unavailable)? == 0 {
                return Err(ApprovalError::Unavailable(req.prompt_id()));
            }
            match line.trim().to_ascii_lowercase().as_str() {
                "y" | "yes" => return Ok(ApprovalDecision::Approve),
                "n" | "no" => return Ok(ApprovalDecision::Deny),
                "r" | "redact" => return Ok(ApprovalDecision::Redact),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(kind: ApprovalKind, subject: &str) -> ApprovalRequest {
        ApprovalRequest {
            kind,
            subject: subject.into(),
            card: String::new(),
        }
    }

    #[test]
    fn lookup_order() {
        let a = ScriptedApproval::from_json(
            r#"{"default":"deny","prompts":{"permission:NETWORK_EGRESS":"approve","declassify":"approve"}}"#,
        )
        .unwrap();
        assert_eq!(a.decide(&req(ApprovalKind::Permission, "NETWORK_EGRESS")), Ok(ApprovalDecision::Approve));
        assert_eq!(a.decide(&req(ApprovalKind::Permission, "PAYMENT")), Ok(ApprovalDecision::Deny));
        assert_eq!(a.decide(&req(ApprovalKind::Declassify, "7")), Ok(ApprovalDecision::Approve));
        assert_eq!(a.prompt_count(), 3);
        assert!(ScriptedApproval::empty().decide(&req(ApprovalKind::Action, "x")).is_err());
    }

    #[test]
    fn interactive_reads_answers() {
        let input = std::io::Cursor::new(b"maybe\ny\nr\n".to_vec());
        let a = InteractiveApproval::new(input, Vec::new());
        assert_eq!(a.decide(&req(ApprovalKind::Action, "pay")), Ok(ApprovalDecision::Approve));
        assert_eq!(a.decide(&req(ApprovalKind::Sensitive, "m")), Ok(ApprovalDecision::Redact));
        assert!(a.decide(&req(ApprovalKind::Action, "pay")).is_err());
        let out = String::from_utf8(a.io.lock().1.clone()).unwrap();
        assert!(out.contains("[action] pay"));
    }
}
