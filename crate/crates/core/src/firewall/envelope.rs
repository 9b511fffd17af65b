use serde::{Deserialize, Serialize};

use crate::platform::{verify, AttestationToken, Encoder, Signature};
use crate::registry::AgentDid;
use crate::session::{SessionToken, TokenId};

/// An app agent's output, signed by the kernel with the origin's vault key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationEnvelope {
    pub payload: String,
    pub origin: AgentDid,
    pub session: TokenId,
    pub step_stamp: u64,
    pub resource_id: String,
    pub signature: Signature,
    pub attestation: Option<AttestationToken>,
}

impl ObservationEnvelope {
    pub fn signed_body(payload: &str, origin: &AgentDid, session: TokenId, step: u64, resource_id: &str) -> Vec<u8> {
        Encoder::new()
            .str("aura.observation.v1")
            .str(payload)
            .str(&origin.to_string())
            .u128(session.0)
            .u64(step)
            .str(resource_id)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    UnknownSession,
    OriginMismatch,
    Stale,
    Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvelopeVerdict {
    Accepted(AcceptedObservation),
    Rejected(RejectReason),
}

/// An observation that passed (or, with the firewall disabled, skipped)
/// envelope verification. Only the kernel creates these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AcceptedObservation {
    payload: String,
    origin: AgentDid,
    session: TokenId,
    resource_id: String,
    verified: bool,
}

impl AcceptedObservation {
    pub(crate) fn new(env: &ObservationEnvelope, verified: bool) -> Self {
        Self {
            payload: env.payload.clone(),
            origin: env.origin.clone(),
            session: env.session,
            resource_id: env.resource_id.clone(),
            verified,
        }
    }

    #[cfg(test)]
    pub(crate) fn for_tests(payload: &str) -> Self {
        Self {
            payload: payload.to_string(),
            origin: "did:aura:t:0000000000000000000000000000000000000000000000000000000000000000:u"
                .parse()
                .unwrap(),
            session: TokenId(1),
            resource_id: "r".into(),
            verified: true,
        }
    }

    pub fn payload(&self) -> &str {
        &self.payload
    }

    pub fn origin(&self) -> &AgentDid {
        &self.origin
    }

    pub fn session(&self) -> TokenId {
        self.session
    }

    pub fn resource_id(&self) -> &str {
        &self.resource_id
    }

    /// False when the firewall was bypassed.
    pub fn verified(&self) -> bool {
        self.verified
    }
}

/// Checks an envelope against the session it names (looked up by the kernel).
pub fn verify_envelope(env: &ObservationEnvelope, session: Option<&SessionToken>) -> EnvelopeVerdict {
    let Some(tok) = session else {
        return EnvelopeVerdict::Rejected(RejectReason::UnknownSession);
    };
    if tok.principal != env.origin {
        return EnvelopeVerdict::Rejected(RejectReason::OriginMismatch);
    }
    if !tok.is_live() || env.step_stamp < tok.issued_at {
        return EnvelopeVerdict::Rejected(RejectReason::Stale);
    }
    let body = ObservationEnvelope::signed_body(&env.payload, &env.origin, env.session, env.step_stamp, &env.resource_id);
    if !verify(&tok.agent_pubkey, &body, &env.signature) {
        return EnvelopeVerdict::Rejected(RejectReason::Signature);
    }
    EnvelopeVerdict::Accepted(AcceptedObservation::new(env, true))
}
