//! Global Agent Registry: developer enrollment, identity-card issuance,
//! manifest vetting and revocation.
//!
//! The registry is the certificate authority for agents. An identity card
//! binds an agent DID, its public key and its capability boundary under the
//! registry root signature. Vetting uses a fixed category/permission matrix
//! (see [`AppCategory::allowed_permissions`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{hash, hash_fields, verify, DecodeError, Decoder, Digest, Encoder, PublicKey, Signature};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("developer '{0}' already enrolled")]
    DuplicateDeveloper(String),
    #[error("developer key already bound to an active developer")]
    DuplicateDeveloperKey,
    #[error("unknown developer '{0}'")]
    UnknownDeveloper(String),
    #[error("developer '{0}' is revoked")]
    DeveloperRevoked(String),
    #[error("manifest signature does not verify under the developer key")]
    BadManifestSignature,
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("unknown app category '{0}'")]
    UnknownCategory(String),
    #[error("unknown serial {0}")]
    UnknownSerial(u64),
    #[error("invalid capability boundary: {0}")]
    InvalidBoundary(String),
    #[error("invalid DID: {0}")]
    InvalidDid(String),
    #[error("registry journal: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry journal corrupt: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SemanticPermission {
    ReadContacts,
    AccessFineLocation,
    RecordAudio,
    SendMessage,
    Payment,
    WriteStorage,
    InstallPackages,
    ModifySettings,
    NetworkEgress,
    ReadNotes,
    ReadCalendar,
}

impl SemanticPermission {
    pub const ALL: [SemanticPermission; 11] = [
        SemanticPermission::ReadContacts,
        SemanticPermission::AccessFineLocation,
        SemanticPermission::RecordAudio,
        SemanticPermission::SendMessage,
        SemanticPermission::Payment,
        SemanticPermission::WriteStorage,
        SemanticPermission::InstallPackages,
        SemanticPermission::ModifySettings,
        SemanticPermission::NetworkEgress,
        SemanticPermission::ReadNotes,
        SemanticPermission::ReadCalendar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SemanticPermission::ReadContacts => "READ_CONTACTS",
            SemanticPermission::AccessFineLocation => "ACCESS_FINE_LOCATION",
            SemanticPermission::RecordAudio => "RECORD_AUDIO",
            SemanticPermission::SendMessage => "SEND_MESSAGE",
            SemanticPermission::Payment => "PAYMENT",
            SemanticPermission::WriteStorage => "WRITE_STORAGE",
            SemanticPermission::InstallPackages => "INSTALL_PACKAGES",
            SemanticPermission::ModifySettings => "MODIFY_SETTINGS",
            SemanticPermission::NetworkEgress => "NETWORK_EGRESS",
            SemanticPermission::ReadNotes => "READ_NOTES",
            SemanticPermission::ReadCalendar => "READ_CALENDAR",
        }
    }
}

impl fmt::Display for SemanticPermission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SemanticPermission {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown permission '{s}'"))
    }
}

/// The static ceiling of permissions and egress domains an agent may ever hold.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CapabilityBoundary {
    pub permissions: BTreeSet<SemanticPermission>,
    pub domain_allowlist: BTreeSet<String>,
}

impl CapabilityBoundary {
    /// Builds a boundary, lower-casing hostnames. The allowlist must be
    /// nonempty exactly when `NETWORK_EGRESS` is granted.
    pub fn new<P, D, S>(permissions: P, domains: D) -> Result<Self, RegistryError>
    where
        P: IntoIterator<Item = SemanticPermission>,
        D: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let b = Self {
            permissions: permissions.into_iter().collect(),
            domain_allowlist: domains
                .into_iter()
                .map(|d| d.as_ref().trim().to_ascii_lowercase())
                .collect(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let egress = self.permissions.contains(&SemanticPermission::NetworkEgress);
        if egress == self.domain_allowlist.is_empty() {
            return Err(RegistryError::InvalidBoundary(if egress {
                "NETWORK_EGRESS requires a nonempty domain allowlist".into()
            } else {
                "domain allowlist requires NETWORK_EGRESS".into()
            }));
        }
        for d in &self.domain_allowlist {
            let ok = !d.is_empty()
                && d.split('.').all(|label| {
                    !label.is_empty() && label.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
                });
            if !ok {
                return Err(RegistryError::InvalidBoundary(format!("invalid hostname '{d}'")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: SemanticPermission) -> bool {
        self.permissions.contains(&p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.list(self.permissions.iter(), |e, p| {
            e.str(p.name());
        });
        enc.list(self.domain_allowlist.iter(), |e, d| {
            e.str(d);
        });
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let mut permissions = BTreeSet::new();
        for _ in 0..d.count()? {
            let p = d.str()?.parse().map_err(DecodeError::Invalid)?;
            permissions.insert(p);
        }
        let mut domain_allowlist = BTreeSet::new();
        for _ in 0..d.count()? {
            domain_allowlist.insert(d.str()?.to_string());
        }
        d.finish()?;
        let b = Self {
            permissions,
            domain_allowlist,
        };
        // Canonical form only: a re-encoding must reproduce the input.
        if b.encode() != bytes {
            return Err(DecodeError::Invalid("non-canonical capability boundary".into()));
        }
        Ok(b)
    }
}

/// Decentralized identifier for a ⟨developer, bundle, user⟩ triple, rendered
/// as `did:aura:<dev>:<bundle-hex>:<user>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AgentDid {
    developer: String,
    bundle_fingerprint: Digest,
    user_account: String,
}

fn valid_component(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-' | b'@'))
}

impl AgentDid {
    pub fn new(developer: &str, bundle_fingerprint: Digest, user_account: &str) -> Result<Self, RegistryError> {
        for (what, c) in [("developer", developer), ("user account", user_account)] {
            if !valid_component(c) {
                return Err(RegistryError::InvalidDid(format!("bad {what} component '{c}'")));
            }
        }
        Ok(Self {
            developer: developer.to_string(),
            bundle_fingerprint,
            user_account: user_account.to_string(),
        })
    }

    pub fn developer(&self) -> &str {
        &self.developer
    }

    pub fn bundle_fingerprint(&self) -> Digest {
        self.bundle_fingerprint
    }

    pub fn user_account(&self) -> &str {
        &self.user_account
    }
}

impl fmt::Display for AgentDid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "did:aura:{}:{}:{}", self.developer, self.bundle_fingerprint, self.user_account)
    }
}

impl FromStr for AgentDid {
    type Err = RegistryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["did", "aura", dev, bundle, user] => {
                let fp = Digest::from_hex(bundle).map_err(|e| RegistryError::InvalidDid(e.to_string()))?;
                AgentDid::new(dev, fp, user)
            }
            _ => Err(RegistryError::InvalidDid(format!("malformed DID '{s}'"))),
        }
    }
}

impl TryFrom<String> for AgentDid {
    type Error = RegistryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AgentDid> for String {
    fn from(d: AgentDid) -> String {
        d.to_string()
    }
}

/// App categories for manifest vetting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AppCategory {
    SystemAssistant,
    Calculator,
    Messaging,
    Mail,
    Travel,
    Browser,
    Notes,
    SocialMedia,
    Wallet,
    Clock,
    Calendar,
    AppStore,
    Utility,
}

impl AppCategory {
    pub const ALL: [AppCategory; 13] = [
        AppCategory::SystemAssistant,
        AppCategory::Calculator,
        AppCategory::Messaging,
        AppCategory::Mail,
        AppCategory::Travel,
        AppCategory::Browser,
        AppCategory::Notes,
        AppCategory::SocialMedia,
        AppCategory::Wallet,
        AppCategory::Clock,
        AppCategory::Calendar,
        AppCategory::AppStore,
        AppCategory::Utility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AppCategory::SystemAssistant => "system-assistant",
            AppCategory::Calculator => "calculator",
            AppCategory::Messaging => "messaging",
            AppCategory::Mail => "mail",
            AppCategory::Travel => "travel",
            AppCategory::Browser => "browser",
            AppCategory::Notes => "notes",
            AppCategory::SocialMedia => "social-media",
            AppCategory::Wallet => "wallet",
            AppCategory::Clock => "clock",
            AppCategory::Calendar => "calendar",
            AppCategory::AppStore => "app-store",
            AppCategory::Utility => "utility",
        }
    }

    /// The permission-compatibility matrix.
    pub fn allowed_permissions(self) -> BTreeSet<SemanticPermission> {
        use SemanticPermission::*;
        let list: &[SemanticPermission] = match self {
            AppCategory::SystemAssistant => &[
                ReadContacts,
                ReadCalendar,
                ReadNotes,
                AccessFineLocation,
                RecordAudio,
                SendMessage,
                ModifySettings,
            ],
            AppCategory::Calculator => &[],
            AppCategory::Messaging => &[ReadContacts, SendMessage, WriteStorage, NetworkEgress],
            AppCategory::Mail => &[ReadContacts, SendMessage, WriteStorage, NetworkEgress],
            AppCategory::Travel => &[NetworkEgress, ReadCalendar, Payment, AccessFineLocation, WriteStorage],
            AppCategory::Browser => &[NetworkEgress, WriteStorage],
            AppCategory::Notes => &[ReadNotes, WriteStorage],
            AppCategory::SocialMedia => &[NetworkEgress, SendMessage, WriteStorage, ReadContacts],
            AppCategory::Wallet => &[Payment, NetworkEgress],
            AppCategory::Clock => &[ModifySettings, WriteStorage],
            AppCategory::Calendar => &[ReadCalendar, WriteStorage],
            AppCategory::AppStore => &[InstallPackages, NetworkEgress, WriteStorage],
            AppCategory::Utility => &[WriteStorage],
        };
        list.iter().copied().collect()
    }
}

impl fmt::Display for AppCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AppCategory {
    type Err = RegistryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| RegistryError::UnknownCategory(s.to_string()))
    }
}

/// Checks a requested boundary against the category matrix.
pub fn vet_manifest(category: AppCategory, s_max: &CapabilityBoundary) -> Result<(), RegistryError> {
    let allowed = category.allowed_permissions();
    let excess: Vec<&str> = s_max
        .permissions
        .iter()
        .filter(|p| !allowed.contains(p))
        .map(|p| p.name())
        .collect();
    if excess.is_empty() {
        Ok(())
    } else {
        Err(RegistryError::PolicyViolation(format!(
            "category {category} may not request {}",
            excess.join(", ")
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeveloperStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeveloperIdentity {
    pub dev_id: String,
    pub dev_pubkey: PublicKey,
    pub status: DeveloperStatus,
}

/// Agent Identity Card.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentIdentityCard {
    pub did: AgentDid,
    pub agent_pubkey: PublicKey,
    pub s_max: CapabilityBoundary,
    pub serial: u64,
    pub gar_signature: Signature,
}

impl AgentIdentityCard {
    /// Bytes covered by the registry signature: DID, public key, capability
    /// boundary and serial, in that order.
    pub fn signed_payload(did: &AgentDid, agent_pubkey: &PublicKey, s_max: &CapabilityBoundary, serial: u64) -> Vec<u8> {
        Encoder::new()
            .str("aura.aic.v1")
            .str(&did.to_string())
            .bytes(agent_pubkey.as_bytes())
            .bytes(&s_max.encode())
            .u64(serial)
            .finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .str(&self.did.to_string())
            .bytes(self.agent_pubkey.as_bytes())
            .bytes(&self.s_max.encode())
            .u64(self.serial)
            .bytes(self.gar_signature.as_bytes())
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let did = d.str()?.parse().map_err(|e: RegistryError| DecodeError::Invalid(e.to_string()))?;
        let agent_pubkey = PublicKey(d.array()?);
        let s_max = CapabilityBoundary::decode(d.bytes()?)?;
        let serial = d.u64()?;
        let gar_signature = Signature(d.array()?);
        d.finish()?;
        let aic = Self {
            did,
            agent_pubkey,
            s_max,
            serial,
            gar_signature,
        };
        // Text fields parse leniently (hex case), so insist on the canonical form.
        if aic.encode() != bytes {
            return Err(DecodeError::Invalid("non-canonical identity card".into()));
        }
        Ok(aic)
    }

    /// SHA-256 of the full card encoding; used to attribute audit records.
    pub fn fingerprint(&self) -> Digest {
        hash(&self.encode())
    }
}

/// Bytes a developer signs when submitting a manifest.
pub fn manifest_payload(did: &AgentDid, s_max: &CapabilityBoundary) -> Vec<u8> {
    Encoder::new()
        .str("aura.manifest.v1")
        .str(&did.to_string())
        .bytes(&s_max.encode())
        .finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationList {
    pub epoch: u64,
    pub revoked_serials: BTreeSet<u64>,
    pub list_signature: Signature,
}

impl RevocationList {
    pub fn signed_body(epoch: u64, serials: &BTreeSet<u64>) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("aura.revocations.v1").u64(epoch);
        enc.list(serials.iter(), |e, s| {
            e.u64(*s);
        });
        enc.finish()
    }

    pub fn verify(&self, root: &PublicKey) -> bool {
        verify(root, &Self::signed_body(self.epoch, &self.revoked_serials), &self.list_signature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    Signature,
    Revoked,
    RevocationList,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::Signature => "signature",
            InvalidReason::Revoked => "revoked",
            InvalidReason::RevocationList => "revocation-list",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AicStatus {
    Valid,
    Invalid(InvalidReason),
}

/// Verifies a card against the pinned registry root and a revocation list.
/// An unverifiable revocation list fails closed.
pub fn verify_aic(aic: &AgentIdentityCard, root: &PublicKey, rev: &RevocationList) -> AicStatus {
    if !rev.verify(root) {
        return AicStatus::Invalid(InvalidReason::RevocationList);
    }
    let payload = AgentIdentityCard::signed_payload(&aic.did, &aic.agent_pubkey, &aic.s_max, aic.serial);
    if !verify(root, &payload, &aic.gar_signature) {
        return AicStatus::Invalid(InvalidReason::Signature);
    }
    if rev.revoked_serials.contains(&aic.serial) {
        return AicStatus::Invalid(InvalidReason::Revoked);
    }
    AicStatus::Valid
}

/// A developer signing key. Stands in for the developer's HSM-held key.
pub struct DeveloperKey {
    key: SigningKey,
}

impl DeveloperKey {
    pub fn derive(dev_id: &str, seed: u64) -> Self {
        Self {
            key: SigningKey::from_bytes(&hash_fields(&[b"aura.developer-key", dev_id.as_bytes(), &seed.to_be_bytes()]).0),
        }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.key.verifying_key().to_bytes())
    }

    pub fn sign_manifest(&self, did: &AgentDid, s_max: &CapabilityBoundary) -> Signature {
        Signature(self.key.sign(&manifest_payload(did, s_max)).to_bytes())
    }
}

#[derive(Default)]
struct State {
    developers: BTreeMap<String, DeveloperIdentity>,
    issued: BTreeMap<u64, AgentIdentityCard>,
    revocation_reasons: BTreeMap<u64, String>,
    revocations: Option<RevocationList>,
    next_serial: u64,
}

/// The registry authority. Issuance and revocation are serialized behind one
/// lock; verification is a free function over the pinned root.
pub struct Registry {
    key: SigningKey,
    root: PublicKey,
    state: Mutex<State>,
    journal: Option<PathBuf>,
}

const TAG_DEVELOPER: u8 = 1;
const TAG_AIC: u8 = 2;
const TAG_REVOKE: u8 = 3;

impl Registry {
    pub fn new(seed: u64) -> Self {
        let key = SigningKey::from_bytes(&hash_fields(&[b"aura.gar-root", &seed.to_be_bytes()]).0);
        let root = PublicKey(key.verifying_key().to_bytes());
        let reg = Self {
            key,
            root,
            state: Mutex::new(State {
                next_serial: 1,
                ..State::default()
            }),
            journal: None,
        };
        {
            let mut st = reg.state.lock();
            st.revocations = Some(reg.sign_list(0, BTreeSet::new()));
        }
        reg
    }

    /// Opens a registry backed by an append-only journal, replaying any
    /// existing records.
    pub fn open(path: impl AsRef<Path>, seed: u64) -> Result<Self, RegistryError> {
        let mut reg = Self::new(seed);
        let path = path.as_ref().to_path_buf();
        if path.exists() {
            let mut buf = Vec::new();
            File::open(&path)?.read_to_end(&mut buf)?;
            let mut frames = Decoder::new(&buf);
            while !frames.is_empty() {
                reg.replay(frames.bytes()?)?;
            }
        }
        reg.journal = Some(path);
        Ok(reg)
    }

    fn replay(&self, frame: &[u8]) -> Result<(), RegistryError> {
        let mut d = Decoder::new(frame);
        match d.u8()? {
            TAG_DEVELOPER => {
                let dev_id = d.str()?.to_string();
                let key = PublicKey(d.array()?);
                self.enroll_inner(&dev_id, key)?;
            }
            TAG_AIC => {
                let aic = AgentIdentityCard::decode(d.bytes()?)?;
                let mut st = self.state.lock();
                st.next_serial = st.next_serial.max(aic.serial + 1);
                st.issued.insert(aic.serial, aic);
            }
            TAG_REVOKE => {
                let serial = d.u64()?;
                let reason = d.str()?.to_string();
                self.revoke_inner(serial, &reason)?;
            }
            t => return Err(DecodeError::Invalid(format!("unknown journal tag {t}")).into()),
        }
        Ok(())
    }

    fn append_journal(&self, frame: Vec<u8>) -> Result<(), RegistryError> {
        if let Some(path) = &self.journal {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&Encoder::new().bytes(&frame).finish())?;
            f.sync_data()?;
        }
        Ok(())
    }

    /// The pinned root key devices embed in their boot chain.
    pub fn root_key(&self) -> PublicKey {
        self.root
    }

    pub fn enroll_developer(&self, dev_id: &str, dev_pubkey: PublicKey) -> Result<DeveloperIdentity, RegistryError> {
        let d = self.enroll_inner(dev_id, dev_pubkey)?;
        self.append_journal(Encoder::new().u8(TAG_DEVELOPER).str(dev_id).bytes(dev_pubkey.as_bytes()).finish())?;
        Ok(d)
    }

    fn enroll_inner(&self, dev_id: &str, dev_pubkey: PublicKey) -> Result<DeveloperIdentity, RegistryError> {
        if !valid_component(dev_id) {
            return Err(RegistryError::InvalidDid(format!("bad developer id '{dev_id}'")));
        }
        let mut st = self.state.lock();
        if st.developers.contains_key(dev_id) {
            return Err(RegistryError::DuplicateDeveloper(dev_id.to_string()));
        }
        if st
            .developers
            .values()
            .any(|d| d.status == DeveloperStatus::Active && d.dev_pubkey == dev_pubkey)
        {
            return Err(RegistryError::DuplicateDeveloperKey);
        }
        let d = DeveloperIdentity {
            dev_id: dev_id.to_string(),
            dev_pubkey,
            status: DeveloperStatus::Active,
        };
        st.developers.insert(dev_id.to_string(), d.clone());
        Ok(d)
    }

    /// Validates a developer-signed manifest and issues an identity card.
    pub fn issue_aic(
        &self,
        category: AppCategory,
        did: AgentDid,
        agent_pubkey: PublicKey,
        s_max: CapabilityBoundary,
        manifest_sig: &Signature,
    ) -> Result<AgentIdentityCard, RegistryError> {
        let aic = {
            let mut st = self.state.lock();
            let dev = st
                .developers
                .get(did.developer())
                .ok_or_else(|| RegistryError::UnknownDeveloper(did.developer().to_string()))?;
            if dev.status != DeveloperStatus::Active {
                return Err(RegistryError::DeveloperRevoked(dev.dev_id.clone()));
            }
            if !verify(&dev.dev_pubkey, &manifest_payload(&did, &s_max), manifest_sig) {
                return Err(RegistryError::BadManifestSignature);
            }
            s_max.validate()?;
            vet_manifest(category, &s_max)?;
            let serial = st.next_serial;
            st.next_serial += 1;
            let payload = AgentIdentityCard::signed_payload(&did, &agent_pubkey, &s_max, serial);
            let aic = AgentIdentityCard {
                did,
                agent_pubkey,
                s_max,
                serial,
                gar_signature: Signature(self.key.sign(&payload).to_bytes()),
            };
            st.issued.insert(serial, aic.clone());
            aic
        };
        self.append_journal(Encoder::new().u8(TAG_AIC).bytes(&aic.encode()).finish())?;
        Ok(aic)
    }

    /// Adds `serial` to the revocation list and publishes a new epoch.
    pub fn revoke_aic(&self, serial: u64, reason: &str) -> Result<RevocationList, RegistryError> {
        let list = self.revoke_inner(serial, reason)?;
        self.append_journal(Encoder::new().u8(TAG_REVOKE).u64(serial).str(reason).finish())?;
        Ok(list)
    }

    fn revoke_inner(&self, serial: u64, reason: &str) -> Result<RevocationList, RegistryError> {
        let mut st = self.state.lock();
        if !st.issued.contains_key(&serial) {
            return Err(RegistryError::UnknownSerial(serial));
        }
        let prev = st.revocations.as_ref().expect("list initialized");
        let mut serials = prev.revoked_serials.clone();
        serials.insert(serial);
        let list = self.sign_list(prev.epoch + 1, serials);
        st.revocation_reasons.entry(serial).or_insert_with(|| reason.to_string());
        st.revocations = Some(list.clone());
        Ok(list)
    }

    fn sign_list(&self, epoch: u64, serials: BTreeSet<u64>) -> RevocationList {
        let sig = self.key.sign(&RevocationList::signed_body(epoch, &serials));
        RevocationList {
            epoch,
            revoked_serials: serials,
            list_signature: Signature(sig.to_bytes()),
        }
    }

    /// The latest signed revocation list.
    pub fn revocation_list(&self) -> RevocationList {
        self.state.lock().revocations.clone().expect("list initialized")
    }

    pub fn verify(&self, aic: &AgentIdentityCard) -> AicStatus {
        verify_aic(aic, &self.root, &self.revocation_list())
    }

    pub fn developers(&self) -> Vec<DeveloperIdentity> {
        self.state.lock().developers.values().cloned().collect()
    }

    pub fn issued(&self) -> Vec<AgentIdentityCard> {
        self.state.lock().issued.values().cloned().collect()
    }

    /// Canonical listing: developers by id, then cards by serial, then the
    /// revocation list.
    pub fn show(&self) -> String {
        let st = self.state.lock();
        let mut out = format!("root {}\n", self.root);
        for d in st.developers.values() {
            out.push_str(&format!(
                "developer {} key={} status={:?}\n",
                d.dev_id, d.dev_pubkey, d.status
            ));
        }
        for a in st.issued.values() {
            let perms: Vec<&str> = a.s_max.permissions.iter().map(|p| p.name()).collect();
            let domains: Vec<&str> = a.s_max.domain_allowlist.iter().map(String::as_str).collect();
            let revoked = if st.revocation_reasons.contains_key(&a.serial) { " REVOKED" } else { "" };
            out.push_str(&format!(
                "aic serial={} did={} perms=[{}] domains=[{}] fp={}{}\n",
                a.serial,
                a.did,
                perms.join(","),
                domains.join(","),
                &a.fingerprint().to_hex()[..16],
                revoked
            ));
        }
        let rl = st.revocations.as_ref().expect("list initialized");
        let serials: Vec<String> = rl.revoked_serials.iter().map(u64::to_string).collect();
        out.push_str(&format!("revocations epoch={} serials=[{}]\n", rl.epoch, serials.join(",")));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use SemanticPermission::*;

    struct Fixture {
        reg: Registry,
        dev: DeveloperKey,
    }

    fn fixture() -> Fixture {
        let reg = Registry::new(1);
        let dev = DeveloperKey::derive("booking-inc", 1);
        reg.enroll_developer("booking-inc", dev.public()).unwrap();
        Fixture { reg, dev }
    }

    fn agent_key(tag: &str) -> PublicKey {
        PublicKey(SigningKey::from_bytes(&hash(tag.as_bytes()).0).verifying_key().to_bytes())
    }

    fn booking_did() -> AgentDid {
        AgentDid::new("booking-inc", hash(b"booking-bundle"), "alice").unwrap()
    }

    fn issue_booking(f: &Fixture) -> AgentIdentityCard {
        let s_max = CapabilityBoundary::new([NetworkEgress, ReadCalendar], ["api.booking.com"]).unwrap();
        let sig = f.dev.sign_manifest(&booking_did(), &s_max);
        f.reg
            .issue_aic(AppCategory::Travel, booking_did(), agent_key("booking"), s_max, &sig)
            .unwrap()
    }

    #[test]
    fn enroll_fresh_and_duplicate() {
        let f = fixture();
        assert_eq!(f.reg.developers()[0].status, DeveloperStatus::Active);
        assert!(matches!(
            f.reg.enroll_developer("booking-inc", DeveloperKey::derive("x", 9).public()),
            Err(RegistryError::DuplicateDeveloper(_))
        ));
        assert!(matches!(
            f.reg.enroll_developer("other", f.dev.public()),
            Err(RegistryError::DuplicateDeveloperKey)
        ));
    }

    #[test]
    fn booking_agent_issued_and_valid() {
        let f = fixture();
        let aic = issue_booking(&f);
        assert_eq!(f.reg.verify(&aic), AicStatus::Valid);
        assert!(aic.s_max.domain_allowlist.contains("api.booking.com"));
    }

    #[test]
    fn upper_cased_did_hex_does_not_decode() {
        let f = fixture();
        let enc = issue_booking(&f).encode();
        assert!(AgentIdentityCard::decode(&enc).is_ok());
        let text = String::from_utf8_lossy(&enc).into_owned();
        let dev_at = text.find("did:aura:").unwrap() + "did:aura:".len();
        let hex_at = dev_at + text[dev_at..].find(':').unwrap() + 1;
        let at = (hex_at..enc.len()).find(|&i| enc[i].is_ascii_lowercase() && enc[i] <= b'f').unwrap();
        let mut bad = enc.clone();
        bad[at] = bad[at].to_ascii_uppercase();
        assert!(AgentIdentityCard::decode(&bad).is_err());
    }

    #[test]
    fn calculator_requesting_contacts_is_policy_violation() {
        let reg = Registry::new(2);
        let dev = DeveloperKey::derive("calc", 2);
        reg.enroll_developer("calc", dev.public()).unwrap();
        let did = AgentDid::new("calc", hash(b"calc"), "alice").unwrap();
        let s_max = CapabilityBoundary::new([ReadContacts], Vec::<String>::new()).unwrap();
        let sig = dev.sign_manifest(&did, &s_max);
        let err = reg
            .issue_aic(AppCategory::Calculator, did, agent_key("c"), s_max, &sig)
            .unwrap_err();
        assert!(matches!(err, RegistryError::PolicyViolation(_)));
    }

    #[test]
    fn tampered_manifest_signature_rejected() {
        let f = fixture();
        let s_max = CapabilityBoundary::new([NetworkEgress], ["api.booking.com"]).unwrap();
        let mut sig = f.dev.sign_manifest(&booking_did(), &s_max);
        sig.0[5] ^= 1;
        assert!(matches!(
            f.reg.issue_aic(AppCategory::Travel, booking_did(), agent_key("b"), s_max, &sig),
            Err(RegistryError::BadManifestSignature)
        ));
    }

    #[test]
    fn unknown_developer_rejected() {
        let reg = Registry::new(3);
        let did = AgentDid::new("ghost", hash(b"g"), "alice").unwrap();
        let s_max = CapabilityBoundary::default();
        let sig = DeveloperKey::derive("ghost", 3).sign_manifest(&did, &s_max);
        assert!(matches!(
            reg.issue_aic(AppCategory::Utility, did, agent_key("g"), s_max, &sig),
            Err(RegistryError::UnknownDeveloper(_))
        ));
    }

    #[test]
    fn vet_manifest_cases() {
        assert!(vet_manifest(AppCategory::Calculator, &CapabilityBoundary::default()).is_ok());
        let contacts = CapabilityBoundary {
            permissions: [ReadContacts].into(),
            domain_allowlist: BTreeSet::new(),
        };
        assert!(vet_manifest(AppCategory::Calculator, &contacts).is_err());
        for c in AppCategory::ALL {
            let full = CapabilityBoundary {
                permissions: c.allowed_permissions(),
                domain_allowlist: BTreeSet::new(),
            };
            assert!(vet_manifest(c, &full).is_ok(), "{c}");
        }
        assert!(matches!("spaceship".parse::<AppCategory>(), Err(RegistryError::UnknownCategory(_))));
    }

    #[test]
    fn boundary_invariant_enforced() {
        assert!(CapabilityBoundary::new([NetworkEgress], Vec::<String>::new()).is_err());
        assert!(CapabilityBoundary::new([ReadNotes], ["a.com"]).is_err());
        assert!(CapabilityBoundary::new([NetworkEgress], ["bad host"]).is_err());
        let b = CapabilityBoundary::new([NetworkEgress], ["API.Booking.COM"]).unwrap();
        assert!(b.domain_allowlist.contains("api.booking.com"));
    }

    #[test]
    fn did_rendering_is_injective_and_parses() {
        let d = booking_did();
        let s = d.to_string();
        assert!(s.starts_with("did:aura:booking-inc:"));
        assert_eq!(s.parse::<AgentDid>().unwrap(), d);
        assert!(AgentDid::new("a:b", hash(b"x"), "u").is_err());
        let a = AgentDid::new("ab", hash(b"x"), "c").unwrap();
        let b = AgentDid::new("a", hash(b"x"), "bc").unwrap();
        assert_ne!(a.to_string(), b.to_string());
    }

    #[test]
    fn revoke_then_verify_invalid_and_idempotent() {
        let f = fixture();
        let aic = issue_booking(&f);
        let l1 = f.reg.revoke_aic(aic.serial, "violated bounds").unwrap();
        assert_eq!(f.reg.verify(&aic), AicStatus::Invalid(InvalidReason::Revoked));
        let l2 = f.reg.revoke_aic(aic.serial, "again").unwrap();
        assert_eq!(l1.revoked_serials, l2.revoked_serials);
        assert!(l2.epoch > l1.epoch);
        assert!(matches!(f.reg.revoke_aic(999, "x"), Err(RegistryError::UnknownSerial(999))));
    }

    #[test]
    fn revocation_epochs_strictly_increase() {
        let f = fixture();
        let aic = issue_booking(&f);
        let mut last = f.reg.revocation_list().epoch;
        for _ in 0..100 {
            let l = f.reg.revoke_aic(aic.serial, "r").unwrap();
            assert!(l.epoch > last);
            assert!(l.verify(&f.reg.root_key()));
            last = l.epoch;
        }
    }

    #[test]
    fn forged_revocation_list_fails_closed() {
        let f = fixture();
        let aic = issue_booking(&f);
        let mut rl = f.reg.revocation_list();
        rl.epoch += 1;
        assert_eq!(
            verify_aic(&aic, &f.reg.root_key(), &rl),
            AicStatus::Invalid(InvalidReason::RevocationList)
        );
    }

    #[test]
    fn every_single_byte_perturbation_invalidates() {
        let f = fixture();
        let aic = issue_booking(&f);
        let bytes = aic.encode();
        let rl = f.reg.revocation_list();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            if let Ok(bad) = AgentIdentityCard::decode(&b) {
                assert_ne!(verify_aic(&bad, &f.reg.root_key(), &rl), AicStatus::Valid, "byte {i}");
            }
        }
    }

    #[test]
    fn random_forgeries_never_verify() {
        let f = fixture();
        let rl = f.reg.revocation_list();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut sig = [0u8; 64];
            rng.fill_bytes(&mut sig);
            let forged = AgentIdentityCard {
                did: booking_did(),
                agent_pubkey: agent_key(&rng.gen::<u64>().to_string()),
                s_max: CapabilityBoundary::new([NetworkEgress], ["evil.example"]).unwrap(),
                serial: rng.gen(),
                gar_signature: Signature(sig),
            };
            assert_ne!(verify_aic(&forged, &f.reg.root_key(), &rl), AicStatus::Valid);
        }
    }

    #[test]
    fn journal_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.journal");
        let dev = DeveloperKey::derive("booking-inc", 1);
        let (aic, listing) = {
            let reg = Registry::open(&path, 1).unwrap();
            reg.enroll_developer("booking-inc", dev.public()).unwrap();
            let f = Fixture { reg, dev };
            let aic = issue_booking(&f);
            f.reg.revoke_aic(aic.serial, "test").unwrap();
            (aic, f.reg.show())
        };
        let reg = Registry::open(&path, 1).unwrap();
        assert_eq!(reg.show(), listing);
        assert_eq!(reg.verify(&aic), AicStatus::Invalid(InvalidReason::Revoked));
        assert_eq!(reg.issued()[0], aic);
    }
}
