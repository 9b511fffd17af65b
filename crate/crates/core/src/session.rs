//! Mutual attestation and the token-to-process map.
//!
//! Agents prove possession of their identity key by signing a kernel-issued
//! challenge through the vault. The kernel captures the caller's process
//! identity itself; nothing an agent says about who it is is trusted.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{
    verify, Caller, Digest, Encoder, KeyHandle, Platform, PlatformError, ProcessIdentity, PublicKey, Signature,
};
use crate::registry::{verify_aic, AgentDid, AgentIdentityCard, AicStatus, CapabilityBoundary, InvalidReason, RevocationList};

/// 128-bit session token identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u128);

impl TokenId {
    /// Placeholder for records not bound to a session.
    pub const NONE: TokenId = TokenId(0);
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("kernel unavailable")]
    KernelUnavailable,
    #[error("invalid identity card: {0}")]
    InvalidAic(InvalidReason),
    #[error("identity card revoked")]
    RevokedAic,
    #[error("proof of possession failed")]
    ProofFailure,
    #[error("code fingerprint does not match identity card")]
    FingerprintMismatch,
    #[error("unknown token")]
    UnknownToken,
    #[error("token presented by a process it is not bound to")]
    ProcessMismatch,
    #[error("token invalidated")]
    TokenInvalidated,
    #[error("caller is not a system agent")]
    NotSystemAgent,
    #[error("target agent unavailable: {0}")]
    TargetUnavailable(String),
    #[error("no outstanding challenge for this process")]
    NoChallenge,
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

impl SessionError {
    fn from_platform(e: PlatformError) -> Self {
        match e {
            PlatformError::KernelUnavailable | PlatformError::VaultSealed => SessionError::KernelUnavailable,
            e => SessionError::Platform(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Sa,
    Aa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenStatus {
    Live,
    Invalidated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub token_id: TokenId,
    pub principal: AgentDid,
    pub role: Role,
    pub bound_process: ProcessIdentity,
    pub s_max: CapabilityBoundary,
    pub issued_at: u64,
    pub status: TokenStatus,
    pub aic_serial: u64,
    pub aic_fingerprint: Digest,
    pub agent_pubkey: PublicKey,
    /// The SA session that invoked this AA session, once invoked.
    pub parent: Option<TokenId>,
}

impl SessionToken {
    pub fn is_live(&self) -> bool {
        self.status == TokenStatus::Live
    }
}

/// Bytes an agent signs to answer a challenge.
pub fn challenge_message(nonce: &[u8; 32], did: &AgentDid) -> Vec<u8> {
    Encoder::new().str("aura.auth.v1").bytes(nonce).str(&did.to_string()).finish()
}

struct Tables {
    tokens: HashMap<TokenId, SessionToken>,
    challenges: HashMap<u32, [u8; 32]>,
    rng: ChaCha20Rng,
}

/// Authenticates principals and owns every session token.
pub struct SessionManager {
    platform: Arc<Platform>,
    gar_root: PublicKey,
    system_agents: Vec<AgentDid>,
    /// Vault handles for provisioned agent keys, by public key.
    handles: RwLock<HashMap<PublicKey, KeyHandle>>,
    tables: RwLock<Tables>,
    revocations: Mutex<RevocationList>,
}

impl SessionManager {
    pub fn new(
        platform: Arc<Platform>,
        gar_root: PublicKey,
        revocations: RevocationList,
        system_agents: Vec<AgentDid>,
        seed: u64,
    ) -> Self {
        Self {
            platform,
            gar_root,
            system_agents,
            handles: RwLock::new(HashMap::new()),
            tables: RwLock::new(Tables {
                tokens: HashMap::new(),
                challenges: HashMap::new(),
                rng: ChaCha20Rng::seed_from_u64(seed ^ 0x5e55_1011),
            }),
            revocations: Mutex::new(revocations),
        }
    }

    fn online(&self) -> Result<(), SessionError> {
        self.platform.require_online().map_err(SessionError::from_platform)
    }

    /// Generates an identity key inside the vault for the principal running
    /// `proc`. The handle stays with the kernel; the agent learns only the
    /// public key (and a handle it can use from its own process).
    pub fn provision_key(&self, proc: &ProcessIdentity) -> Result<(KeyHandle, PublicKey), SessionError> {
        self.online()?;
        let (h, pk) = self
            .platform
            .generate_keypair(crate::platform::KeyOwner::of(proc))
            .map_err(SessionError::from_platform)?;
        self.handles.write().insert(pk, h);
        Ok((h, pk))
    }

    /// Issues a fresh single-use challenge for `proc`.
    pub fn challenge(&self, proc: &ProcessIdentity) -> Result<[u8; 32], SessionError> {
        self.online()?;
        let mut t = self.tables.write();
        let mut nonce = [0u8; 32];
        t.rng.fill_bytes(&mut nonce);
        t.challenges.insert(proc.pid, nonce);
        Ok(nonce)
    }

    pub fn set_revocations(&self, list: RevocationList) {
        *self.revocations.lock() = list;
    }

    pub fn authenticate(
        &self,
        proc: &ProcessIdentity,
        aic: &AgentIdentityCard,
        proof: &Signature,
        now: u64,
    ) -> Result<SessionToken, SessionError> {
        self.online()?;
        let rev = self.revocations.lock().clone();
        let mut t = self.tables.write();
        // The challenge is consumed whatever the outcome.
        let nonce = t.challenges.remove(&proc.pid).ok_or(SessionError::NoChallenge)?;
        match verify_aic(aic, &self.gar_root, &rev) {
            AicStatus::Valid => {}
            AicStatus::Invalid(InvalidReason::Revoked) => return Err(SessionError::RevokedAic),
            AicStatus::Invalid(r) => return Err(SessionError::InvalidAic(r)),
        }
        if aic.did.bundle_fingerprint() != proc.code_fingerprint {
            return Err(SessionError::FingerprintMismatch);
        }
        if !verify(&aic.agent_pubkey, &challenge_message(&nonce, &aic.did), proof) {
            return Err(SessionError::ProofFailure);
        }
        for tok in t.tokens.values_mut() {
            if tok.principal == aic.did && tok.is_live() {
                tok.status = TokenStatus::Invalidated;
            }
        }
        let token_id = loop {
            let mut b = [0u8; 16];
            t.rng.fill_bytes(&mut b);
            let id = TokenId(u128::from_be_bytes(b));
            if id != TokenId::NONE && !t.tokens.contains_key(&id) {
                break id;
            }
        };
        let role = if self.system_agents.contains(&aic.did) { Role::Sa } else { Role::Aa };
        let token = SessionToken {
            token_id,
            principal: aic.did.clone(),
            role,
            bound_process: *proc,
            s_max: aic.s_max.clone(),
            issued_at: now,
            status: TokenStatus::Live,
            aic_serial: aic.serial,
            aic_fingerprint: aic.fingerprint(),
            agent_pubkey: aic.agent_pubkey,
            parent: None,
        };
        t.tokens.insert(token_id, token.clone());
        Ok(token)
    }

    /// Returns the live token iff `caller` is the process it is bound to.
    pub fn validate_call(&self, token: TokenId, caller: &ProcessIdentity) -> Result<SessionToken, SessionError> {
        self.online()?;
        let t = self.tables.read();
        let tok = t.tokens.get(&token).ok_or(SessionError::UnknownToken)?;
        if tok.bound_process != *caller {
            return Err(SessionError::ProcessMismatch);
        }
        if !tok.is_live() {
            return Err(SessionError::TokenInvalidated);
        }
        Ok(tok.clone())
    }

    /// Looks a token up without a caller check (for envelope verification).
    pub fn get(&self, token: TokenId) -> Option<SessionToken> {
        self.tables.read().tokens.get(&token).cloned()
    }

    /// Links the target AA's live session under the calling SA session.
    pub fn invoke_agent(
        &self,
        sa_token: TokenId,
        caller: &ProcessIdentity,
        target: &AgentDid,
    ) -> Result<SessionToken, SessionError> {
        let sa = self.validate_call(sa_token, caller)?;
        if sa.role != Role::Sa {
            return Err(SessionError::NotSystemAgent);
        }
        let mut t = self.tables.write();
        let aa = t
            .tokens
            .values_mut()
            .find(|tok| tok.principal == *target && tok.is_live() && tok.role == Role::Aa)
            .ok_or_else(|| SessionError::TargetUnavailable(target.to_string()))?;
        aa.parent = Some(sa_token);
        Ok(aa.clone())
    }

    /// Signs `msg` with the principal's vault key on behalf of a validated caller.
    pub fn kernel_sign(&self, token: TokenId, caller: &ProcessIdentity, msg: &[u8]) -> Result<Signature, SessionError> {
        let tok = self.validate_call(token, caller)?;
        let handle = *self
            .handles
            .read()
            .get(&tok.agent_pubkey)
            .ok_or(SessionError::Platform(PlatformError::UnknownHandle))?;
        self.platform
            .vault_sign(&handle, Caller::Process(tok.bound_process), msg)
            .map_err(SessionError::from_platform)
    }

    /// Invalidates every token bound to `pid`; returns the affected ids.
    pub fn on_process_exit(&self, pid: u32) -> Vec<TokenId> {
        let mut t = self.tables.write();
        t.challenges.remove(&pid);
        let mut hit: Vec<TokenId> = t
            .tokens
            .values_mut()
            .filter(|tok| tok.bound_process.pid == pid && tok.is_live())
            .map(|tok| {
                tok.status = TokenStatus::Invalidated;
                tok.token_id
            })
            .collect();
        hit.sort();
        hit
    }

    /// Installs a newer revocation list and invalidates tokens whose cards it
    /// revokes. An unverifiable list is ignored.
    pub fn sweep_revocations(&self, list: RevocationList) -> Vec<TokenId> {
        if !list.verify(&self.gar_root) {
            return Vec::new();
        }
        let mut t = self.tables.write();
        let mut hit: Vec<TokenId> = t
            .tokens
            .values_mut()
            .filter(|tok| tok.is_live() && list.revoked_serials.contains(&tok.aic_serial))
            .map(|tok| {
                tok.status = TokenStatus::Invalidated;
                tok.token_id
            })
            .collect();
        hit.sort();
        *self.revocations.lock() = list;
        hit
    }

    /// Snapshot of every token, ordered by id.
    pub fn tokens(&self) -> BTreeMap<TokenId, SessionToken> {
        self.tables.read().tokens.iter().map(|(k, v)| (*k, v.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{hash, BootImages, ExpectedMeasurements, KeyOwner};
    use crate::registry::{AppCategory, DeveloperKey, Registry, SemanticPermission};

    struct Fixture {
        platform: Arc<Platform>,
        registry: Registry,
        sessions: SessionManager,
    }

    struct Agent {
        proc: ProcessIdentity,
        aic: AgentIdentityCard,
        handle: KeyHandle,
    }

    fn fixture() -> (Fixture, Agent, Agent) {
        let platform = Arc::new(Platform::new(9));
        let img = BootImages::reference();
        platform.secure_boot(&img, &ExpectedMeasurements::from_images(&img));
        let registry = Registry::new(9);
        let dev = DeveloperKey::derive("acme", 9);
        registry.enroll_developer("acme", dev.public()).unwrap();
        let sa_did = AgentDid::new("acme", hash(b"sa"), "alice").unwrap();
        let sessions = SessionManager::new(
            platform.clone(),
            registry.root_key(),
            registry.revocation_list(),
            vec![sa_did.clone()],
            9,
        );
        let mk = |did: AgentDid, pid: u32, cat: AppCategory, perms: Vec<SemanticPermission>| {
            let proc = ProcessIdentity::new(pid, 10_000 + pid, did.bundle_fingerprint());
            let (handle, pk) = sessions.provision_key(&proc).unwrap();
            let s_max = CapabilityBoundary::new(perms, Vec::<String>::new()).unwrap();
            let sig = dev.sign_manifest(&did, &s_max);
            let aic = registry.issue_aic(cat, did, pk, s_max, &sig).unwrap();
            Agent { proc, aic, handle }
        };
        let sa = mk(sa_did, 100, AppCategory::SystemAssistant, vec![SemanticPermission::ReadContacts]);
        let aa = mk(
            AgentDid::new("acme", hash(b"notes"), "alice").unwrap(),
            200,
            AppCategory::Notes,
            vec![SemanticPermission::WriteStorage],
        );
        (
            Fixture {
                platform,
                registry,
                sessions,
            },
            sa,
            aa,
        )
    }

    fn login(f: &Fixture, a: &Agent, proc: &ProcessIdentity) -> Result<SessionToken, SessionError> {
        let nonce = f.sessions.challenge(proc)?;
        let proof = f
            .platform
            .vault_sign(&a.handle, Caller::Process(*proc), &challenge_message(&nonce, &a.aic.did))
            .unwrap_or(Signature([0; 64]));
        f.sessions.authenticate(proc, &a.aic, &proof, 1)
    }

    #[test]
    fn sa_gets_sa_role_and_its_own_boundary() {
        let (f, sa, aa) = fixture();
        let t = login(&f, &sa, &sa.proc).unwrap();
        assert_eq!(t.role, Role::Sa);
        assert_eq!(t.s_max.encode(), sa.aic.s_max.encode());
        let a = login(&f, &aa, &aa.proc).unwrap();
        assert_eq!(a.role, Role::Aa);
    }

    #[test]
    fn foreign_fingerprint_is_rejected() {
        let (f, sa, aa) = fixture();
        let imposter = ProcessIdentity::new(300, aa.proc.uid, hash(b"fake"));
        assert_eq!(login(&f, &sa, &imposter).unwrap_err(), SessionError::FingerprintMismatch);
    }

    #[test]
    fn replayed_proof_fails() {
        let (f, sa, _) = fixture();
        let nonce = f.sessions.challenge(&sa.proc).unwrap();
        let proof = f
            .platform
            .vault_sign(&sa.handle, Caller::Process(sa.proc), &challenge_message(&nonce, &sa.aic.did))
            .unwrap();
        f.sessions.authenticate(&sa.proc, &sa.aic, &proof, 1).unwrap();
        f.sessions.challenge(&sa.proc).unwrap();
        assert_eq!(f.sessions.authenticate(&sa.proc, &sa.aic, &proof, 2).unwrap_err(), SessionError::ProofFailure);
        assert_eq!(f.sessions.authenticate(&sa.proc, &sa.aic, &proof, 2).unwrap_err(), SessionError::NoChallenge);
    }

    #[test]
    fn restart_invalidates_previous_token() {
        let (f, sa, _) = fixture();
        let old = login(&f, &sa, &sa.proc).unwrap();
        f.sessions.on_process_exit(sa.proc.pid);
        let restarted = ProcessIdentity { pid: 101, ..sa.proc };
        let new = login(&f, &sa, &restarted).unwrap();
        assert_eq!(
            f.sessions.validate_call(old.token_id, &sa.proc).unwrap_err(),
            SessionError::TokenInvalidated
        );
        assert_eq!(
            f.sessions.validate_call(old.token_id, &restarted).unwrap_err(),
            SessionError::ProcessMismatch
        );
        assert!(f.sessions.validate_call(new.token_id, &restarted).is_ok());
    }

    #[test]
    fn stolen_token_is_rejected() {
        let (f, sa, aa) = fixture();
        let t = login(&f, &sa, &sa.proc).unwrap();
        assert_eq!(
            f.sessions.validate_call(t.token_id, &aa.proc).unwrap_err(),
            SessionError::ProcessMismatch
        );
        assert_eq!(
            f.sessions.validate_call(TokenId(42), &sa.proc).unwrap_err(),
            SessionError::UnknownToken
        );
    }

    #[test]
    fn only_sa_may_orchestrate() {
        let (f, sa, aa) = fixture();
        let s = login(&f, &sa, &sa.proc).unwrap();
        let a = login(&f, &aa, &aa.proc).unwrap();
        let linked = f.sessions.invoke_agent(s.token_id, &sa.proc, &aa.aic.did).unwrap();
        assert_eq!(linked.token_id, a.token_id);
        assert_eq!(linked.parent, Some(s.token_id));
        assert_eq!(
            f.sessions.invoke_agent(a.token_id, &aa.proc, &sa.aic.did).unwrap_err(),
            SessionError::NotSystemAgent
        );
        f.sessions.on_process_exit(sa.proc.pid);
        assert_eq!(
            f.sessions.invoke_agent(s.token_id, &sa.proc, &aa.aic.did).unwrap_err(),
            SessionError::TokenInvalidated
        );
    }

    #[test]
    fn kernel_sign_and_revocation_sweep() {
        let (f, sa, aa) = fixture();
        let t = login(&f, &aa, &aa.proc).unwrap();
        let sig = f.sessions.kernel_sign(t.token_id, &aa.proc, b"obs").unwrap();
        assert!(verify(&aa.aic.agent_pubkey, b"obs", &sig));
        assert_eq!(
            f.sessions.kernel_sign(t.token_id, &sa.proc, b"obs").unwrap_err(),
            SessionError::ProcessMismatch
        );
        let list = f.registry.revoke_aic(aa.aic.serial, "compromised").unwrap();
        assert_eq!(f.sessions.sweep_revocations(list), vec![t.token_id]);
        assert_eq!(
            f.sessions.kernel_sign(t.token_id, &aa.proc, b"obs").unwrap_err(),
            SessionError::TokenInvalidated
        );
        assert_eq!(login(&f, &aa, &aa.proc).unwrap_err(), SessionError::RevokedAic);
    }

    #[test]
    fn failed_boot_makes_every_call_unavailable() {
        let platform = Arc::new(Platform::new(1));
        let img = BootImages::reference();
        let expected = ExpectedMeasurements::from_images(&img);
        platform.secure_boot(&img.tampered(crate::platform::BootStage::OsImage), &expected);
        let reg = Registry::new(1);
        let s = SessionManager::new(platform.clone(), reg.root_key(), reg.revocation_list(), vec![], 1);
        let p = ProcessIdentity::new(1, 1, Digest::ZERO);
        assert_eq!(s.challenge(&p).unwrap_err(), SessionError::KernelUnavailable);
        assert_eq!(s.provision_key(&p).unwrap_err(), SessionError::KernelUnavailable);
        assert_eq!(s.validate_call(TokenId(1), &p).unwrap_err(), SessionError::KernelUnavailable);
        assert!(platform.generate_keypair(KeyOwner::Platform).is_err());
    }
}
