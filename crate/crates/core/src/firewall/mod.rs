//! The semantic firewall: observation envelopes, sensitive-entity detection
//! and gating, context isolation, and intent filtering.

mod context;
mod envelope;
mod intent;
mod pii;

pub use context::{
    build_context, escape, parse_rendered, unescape, AdversarialPrefixing, ContextHook, ContextParseError,
    CotVerification, FewShotDefense, PromptContext, Segment, SegmentTag, REINFORCE_DIRECTIVE,
};
pub use envelope::{verify_envelope, AcceptedObservation, EnvelopeVerdict, ObservationEnvelope, RejectReason};
pub use intent::{
    filter_intent, normalize, Blacklist, IntentDecision, IntentStage, IntentVerdict, DEFAULT_BLACKLIST,
};
pub use pii::{
    detect_sensitive, luhn_valid, redact, Detector, DictionaryRecognizer, EntityKind, EntitySource, Recognizer,
    SensitiveEntity, DEFAULT_NATIONAL_ID, PASSCODE_CUES, STREET_SUFFIXES,
};

use serde::{Deserialize, Serialize};

use crate::approval::{ApprovalDecision, ApprovalKind, ApprovalProvider, ApprovalRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "text", rename_all = "lowercase")]
pub enum GateOutcome {
    Transmit,
    Redacted(String),
    Terminated,
}

/// Suspends a transmission containing sensitive entities until the user
/// authorizes, redacts, or refuses it. No answer terminates.
pub fn gate_sensitive(
    text: &str,
    entities: &[SensitiveEntity],
    subject: &str,
    approval: &dyn ApprovalProvider,
) -> GateOutcome {
    if entities.is_empty() {
        return GateOutcome::Transmit;
    }
    let kinds: Vec<&str> = entities.iter().map(|e| e.kind.name()).collect();
    let req = ApprovalRequest {
        kind: ApprovalKind::Sensitive,
        subject: subject.to_string(),
        card: format!("Outgoing text contains {}: {}", kinds.join(", "), redact(text, entities)),
    };
    match approval.decide(&req) {
        Ok(ApprovalDecision::Approve) => GateOutcome::Transmit,
        Ok(ApprovalDecision::Redact) => GateOutcome::Redacted(redact(text, entities)),
        Ok(ApprovalDecision::Deny) | Err(_) => GateOutcome::Terminated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approval::ScriptedApproval;

    #[test]
    fn gate_follows_the_user() {
        let t = "card 4111111111111111";
        let e = detect_sensitive(t);
        let yes = ScriptedApproval::with_default(ApprovalDecision::Approve);
        assert_eq!(gate_sensitive(t, &e, "m", &yes), GateOutcome::Transmit);
        let red = ScriptedApproval::with_default(ApprovalDecision::Redact);
        assert_eq!(
            gate_sensitive(t, &e, "m", &red),
            GateOutcome::Redacted("card [REDACTED:CREDIT_CARD]".into())
        );
        let no = ScriptedApproval::with_default(ApprovalDecision::Deny);
        assert_eq!(gate_sensitive(t, &e, "m", &no), GateOutcome::Terminated);
        assert_eq!(gate_sensitive(t, &e, "m", &ScriptedApproval::empty()), GateOutcome::Terminated);
        assert_eq!(gate_sensitive("hi", &[], "m", &no), GateOutcome::Transmit);
    }
}
