//! Tamper-evident accountability log.
//!
//! Every record is chained to its predecessor by SHA-256 and attributed to the
//! fingerprint of the identity card that caused it. Payloads are encrypted at
//! rest; the chain index is not, so integrity can be checked without the
//! device key. A signed checkpoint (record count and head hash) closes the
//! chain against tail truncation. Erasure destroys payloads and appends a
//! signed tombstone, which keeps the chain and earlier exports verifiable.

mod merkle;
mod store;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use merkle::merkle_root;
pub use store::{Checkpoint, MAGIC as STORE_MAGIC};

use crate::platform::{
    hash, verify, Caller, DecodeError, Decoder, Digest, Encoder, KeyHandle, KeyOwner, Platform, PlatformError, PublicKey,
    Signature,
};
use crate::session::TokenId;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("audit chain broken at record {0}")]
    BrokenChain(u64),
    #[error("audit store corrupt: {0}")]
    Corrupt(String),
    #[error("unknown session {0}")]
    UnknownSession(TokenId),
    #[error("empty or out-of-range export {0}..={1}")]
    BadRange(u64, u64),
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    UserInstruction,
    SaReasoning,
    AaResponse,
    SensitiveOp,
    Decision,
    Declassify,
    Alert,
    Auth,
    Revocation,
    /// Run configuration echoed at start-up.
    Config,
    /// Tombstone left by an erasure.
    Erasure,
}

impl EventKind {
    const ALL: [EventKind; 11] = [
        EventKind::UserInstruction,
        EventKind::SaReasoning,
        EventKind::AaResponse,
        EventKind::SensitiveOp,
        EventKind::Decision,
        EventKind::Declassify,
        EventKind::Alert,
        EventKind::Auth,
        EventKind::Revocation,
        EventKind::Config,
        EventKind::Erasure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::UserInstruction => "USER_INSTRUCTION",
            EventKind::SaReasoning => "SA_REASONING",
            EventKind::AaResponse => "AA_RESPONSE",
            EventKind::SensitiveOp => "SENSITIVE_OP",
            EventKind::Decision => "DECISION",
            EventKind::Declassify => "DECLASSIFY",
            EventKind::Alert => "ALERT",
            EventKind::Auth => "AUTH",
            EventKind::Revocation => "REVOCATION",
            EventKind::Config => "CONFIG",
            EventKind::Erasure => "ERASURE",
        }
    }

    fn code(self) -> u8 {
        Self::ALL.iter().position(|e| *e == self).expect("listed") as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Info,
    Warn,
    Critical,
}

impl Severity {
    pub fn name(self) -> &'static str {
        match self {
            Severity::Info => "INFO",
            Severity::Warn => "WARN",
            Severity::Critical => "CRITICAL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub record_id: u64,
    pub session: TokenId,
    pub actor: Digest,
    pub event: EventKind,
    pub severity: Severity,
    pub payload_digest: Digest,
    pub prev_hash: Digest,
    pub this_hash: Digest,
}

/// Chain root for the first record.
pub fn genesis() -> Digest {
    hash(b"aura.audit.genesis.v1")
}

impl AuditRecord {
    fn link_body(
        record_id: u64,
        session: TokenId,
        actor: &Digest,
        event: EventKind,
        severity: Severity,
        payload_digest: &Digest,
        prev_hash: &Digest,
    ) -> Vec<u8> {
        Encoder::new()
            .u64(record_id)
            .u128(session.0)
            .digest(actor)
            .str(event.name())
            .str(severity.name())
            .digest(payload_digest)
            .digest(prev_hash)
            .finish()
    }

    /// Recomputes this record's hash from its other fields.
    pub fn computed_hash(&self) -> Digest {
        hash(&Self::link_body(
            self.record_id,
            self.session,
            &self.actor,
            self.event,
            self.severity,
            &self.payload_digest,
            &self.prev_hash,
        ))
    }

    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .u64(self.record_id)
            .u128(self.session.0)
            .digest(&self.actor)
            .u8(self.event.code())
            .u8(self.severity as u8)
            .digest(&self.payload_digest)
            .digest(&self.prev_hash)
            .digest(&self.this_hash)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let record_id = d.u64()?;
        let session = TokenId(d.u128()?);
        let actor = d.digest()?;
        let event = EventKind::from_code(d.u8()?).ok_or_else(|| DecodeError::Invalid("event code".into()))?;
        let severity = match d.u8()? {
            0 => Severity::Info,
            1 => Severity::Warn,
            2 => Severity::Critical,
            s => return Err(DecodeError::Invalid(format!("severity {s}"))),
        };
        let rec = Self {
            record_id,
            session,
            actor,
            event,
            severity,
            payload_digest: d.digest()?,
            prev_hash: d.digest()?,
            this_hash: d.digest()?,
        };
        d.finish()?;
        Ok(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Intact,
    Broken { at: u64 },
    Corrupt,
}

/// Verifies a full log from genesis: record ids are 1, 2, 3, ..., each hash
/// recomputes, and each record links to its predecessor.
pub fn verify_chain(records: &[AuditRecord]) -> ChainStatus {
    let mut prev = genesis();
    for (i, r) in records.iter().enumerate() {
        let expected_id = i as u64 + 1;
        if r.record_id != expected_id || r.prev_hash != prev || r.computed_hash() != r.this_hash {
            return ChainStatus::Broken { at: expected_id };
        }
        prev = r.this_hash;
    }
    ChainStatus::Intact
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum EraseScope {
    Session(TokenId),
    Agent(Digest),
    All,
}

impl EraseScope {
    fn matches(&self, r: &AuditRecord) -> bool {
        match self {
            EraseScope::Session(s) => r.session == *s,
            EraseScope::Agent(a) => r.actor == *a,
            EraseScope::All => true,
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            EraseScope::Session(s) => Encoder::new().str("session").u128(s.0).finish(),
            EraseScope::Agent(a) => Encoder::new().str("agent").digest(a).finish(),
            EraseScope::All => Encoder::new().str("all").finish(),
        }
    }
}

/// Payload of an erasure record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub scope: EraseScope,
    pub erased: Vec<u64>,
    pub erased_root: Digest,
    pub signature: Signature,
}

impl Tombstone {
    pub fn signed_body(scope: &EraseScope, erased: &[u64], root: &Digest) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("aura.audit.tombstone.v1").bytes(&scope.encode());
        enc.list(erased.iter(), |e, id| {
            e.u64(*id);
        });
        enc.digest(root).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportDigest {
    pub merkle_root: Digest,
    pub first_id: u64,
    pub last_id: u64,
    pub aic_fingerprints: BTreeSet<Digest>,
    pub signature: Signature,
}

impl ExportDigest {
    pub fn signed_body(root: &Digest, first: u64, last: u64, fps: &BTreeSet<Digest>) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("aura.audit.export.v1").digest(root).u64(first).u64(last);
        enc.list(fps.iter(), |e, d| {
            e.digest(d);
        });
        enc.finish()
    }
}

/// Recomputes an export from the records it claims to cover and checks the
/// device signature.
pub fn verify_export(export: &ExportDigest, records: &[AuditRecord], device_key: &PublicKey) -> bool {
    let in_range: Vec<&AuditRecord> = records
        .iter()
        .filter(|r| (export.first_id..=export.last_id).contains(&r.record_id))
        .collect();
    if in_range.len() as u64 != export.last_id.saturating_sub(export.first_id) + 1 {
        return false;
    }
    let leaves: Vec<Digest> = in_range.iter().map(|r| r.this_hash).collect();
    let fps: BTreeSet<Digest> = in_range.iter().map(|r| r.actor).filter(|a| *a != Digest::ZERO).collect();
    merkle_root(&leaves) == Some(export.merkle_root)
        && fps == export.aic_fingerprints
        && verify(
            device_key,
            &ExportDigest::signed_body(&export.merkle_root, export.first_id, export.last_id, &fps),
            &export.signature,
        )
}

/// Fields supplied by a producer; the log assigns ids and hashes.
#[derive(Debug, Clone)]
pub struct NewRecord<'a> {
    pub session: TokenId,
    pub actor: Digest,
    pub event: EventKind,
    pub severity: Severity,
    pub payload: &'a [u8],
}

struct LogState {
    records: Vec<AuditRecord>,
    payloads: Vec<Option<Vec<u8>>>,
    ciphertexts: Vec<Vec<u8>>,
    path: Option<PathBuf>,
}

pub struct AuditLog {
    state: Mutex<LogState>,
    platform: Arc<Platform>,
    key: KeyHandle,
}

fn io_err(e: std::io::Error) -> AuditError {
    AuditError::StoreUnavailable(e.to_string())
}

fn head_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".head");
    PathBuf::from(p)
}

impl AuditLog {
    /// A log with no backing file.
    pub fn in_memory(platform: Arc<Platform>) -> Result<Self, AuditError> {
        let key = platform.derive_secret("audit-store", KeyOwner::Platform)?;
        Ok(Self {
            state: Mutex::new(LogState {
                records: Vec::new(),
                payloads: Vec::new(),
                ciphertexts: Vec::new(),
                path: None,
            }),
            platform,
            key,
        })
    }

    /// Opens (or creates) an encrypted store, verifying whatever is there.
    pub fn open(platform: Arc<Platform>, path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref().to_path_buf();
        let log = Self::in_memory(platform)?;
        if path.exists() {
            let mut bytes = fs::read(&path).map_err(io_err)?;
            if let Ok(head) = fs::read(head_path(&path)) {
                bytes.extend_from_slice(&head);
            }
            let device_key = log.platform.device_public_key()?;
            match verify_serialized(&bytes, &device_key, |r, n, c| log.open_payload(r, n, c)) {
                ChainStatus::Intact => {}
                ChainStatus::Broken { at } => return Err(AuditError::BrokenChain(at)),
                ChainStatus::Corrupt => return Err(AuditError::Corrupt(path.display().to_string())),
            }
            let parsed = store::parse(&bytes).map_err(|e| AuditError::Corrupt(e.to_string()))?;
            let mut st = log.state.lock();
            for s in parsed.records {
                let pt = if s.ciphertext.is_empty() {
                    None
                } else {
                    log.open_payload(&s.record, &s.nonce, &s.ciphertext)
                };
                st.records.push(s.record);
                st.payloads.push(pt);
                st.ciphertexts.push(s.ciphertext);
            }
            st.path = Some(path);
            drop(st);
        } else {
            fs::write(&path, store::MAGIC).map_err(io_err)?;
            log.state.lock().path = Some(path);
            log.write_head()?;
        }
        Ok(log)
    }

    fn open_payload(&self, rec: &AuditRecord, nonce: &[u8; 12], ct: &[u8]) -> Option<Vec<u8>> {
        self.platform
            .vault_open(&self.key, Caller::Kernel, nonce, rec.this_hash.as_bytes(), ct)
            .ok()
    }

    fn seal(&self, rec: &AuditRecord, payload: &[u8]) -> Result<Vec<u8>, AuditError> {
        Ok(self.platform.vault_seal(
            &self.key,
            Caller::Kernel,
            &store::nonce_for(&rec.this_hash),
            rec.this_hash.as_bytes(),
            payload,
        )?)
    }

    /// Appends a record. The record is persisted before this returns.
    /// `SENSITIVE_OP` records are always `CRITICAL`.
    pub fn append(&self, new: NewRecord<'_>) -> Result<AuditRecord, AuditError> {
        let mut st = self.state.lock();
        let severity = if new.event == EventKind::SensitiveOp {
            Severity::Critical
        } else {
            new.severity
        };
        let record_id = st.records.len() as u64 + 1;
        let prev_hash = st.records.last().map(|r| r.this_hash).unwrap_or_else(genesis);
        let payload_digest = hash(new.payload);
        let this_hash = hash(&AuditRecord::link_body(
            record_id,
            new.session,
            &new.actor,
            new.event,
            severity,
            &payload_digest,
            &prev_hash,
        ));
        let rec = AuditRecord {
            record_id,
            session: new.session,
            actor: new.actor,
            event: new.event,
            severity,
            payload_digest,
            prev_hash,
            this_hash,
        };
        let ct = self.seal(&rec, new.payload)?;
        if let Some(path) = &st.path {
            let mut f = OpenOptions::new().append(true).open(path).map_err(io_err)?;
            f.write_all(&store::record_frame(&rec, &ct)).map_err(io_err)?;
        }
        st.records.push(rec.clone());
        st.payloads.push(Some(new.payload.to_vec()));
        st.ciphertexts.push(ct);
        let head = self.checkpoint_locked(&st)?;
        if let Some(path) = &st.path {
            fs::write(head_path(path), head.frame()).map_err(io_err)?;
        }
        Ok(rec)
    }

    fn checkpoint_locked(&self, st: &LogState) -> Result<Checkpoint, AuditError> {
        let count = st.records.len() as u64;
        let head = st.records.last().map(|r| r.this_hash).unwrap_or_else(genesis);
        let signature = self.platform.device_sign(&Checkpoint::body(count, &head))?;
        Ok(Checkpoint { count, head, signature })
    }

    fn write_head(&self) -> Result<(), AuditError> {
        let st = self.state.lock();
        let head = self.checkpoint_locked(&st)?;
        if let Some(path) = &st.path {
            fs::write(head_path(path), head.frame()).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.state.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head(&self) -> Digest {
        self.state.lock().records.last().map(|r| r.this_hash).unwrap_or_else(genesis)
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.state.lock().records.clone()
    }

    /// Records with their decrypted payloads (`None` once erased).
    pub fn entries(&self) -> Vec<(AuditRecord, Option<Vec<u8>>)> {
        let st = self.state.lock();
        st.records.iter().cloned().zip(st.payloads.iter().cloned()).collect()
    }

    pub fn verify(&self) -> ChainStatus {
        verify_chain(&self.state.lock().records)
    }

    /// The store bytes followed by a signed checkpoint frame.
    pub fn serialize(&self) -> Result<Vec<u8>, AuditError> {
        let st = self.state.lock();
        let mut out = store::MAGIC.to_vec();
        for (r, ct) in st.records.iter().zip(&st.ciphertexts) {
            out.extend_from_slice(&store::record_frame(r, ct));
        }
        out.extend_from_slice(&self.checkpoint_locked(&st)?.frame());
        Ok(out)
    }

    /// Verifies serialized bytes produced by this device.
    pub fn verify_serialized(&self, bytes: &[u8]) -> Result<ChainStatus, AuditError> {
        let key = self.platform.device_public_key()?;
        Ok(verify_serialized(bytes, &key, |r, n, c| self.open_payload(r, n, c)))
    }

    /// Signed Merkle digest over records `first..=last`.
    pub fn export(&self, first: u64, last: u64) -> Result<ExportDigest, AuditError> {
        let st = self.state.lock();
        if let ChainStatus::Broken { at } = verify_chain(&st.records) {
            return Err(AuditError::BrokenChain(at));
        }
        if first == 0 || first > last || last > st.records.len() as u64 {
            return Err(AuditError::BadRange(first, last));
        }
        let range = &st.records[first as usize - 1..last as usize];
        let leaves: Vec<Digest> = range.iter().map(|r| r.this_hash).collect();
        let root = merkle_root(&leaves).expect("nonempty range");
        let fps: BTreeSet<Digest> = range.iter().map(|r| r.actor).filter(|a| *a != Digest::ZERO).collect();
        let signature = self
            .platform
            .device_sign(&ExportDigest::signed_body(&root, first, last, &fps))?;
        Ok(ExportDigest {
            merkle_root: root,
            first_id: first,
            last_id: last,
            aic_fingerprints: fps,
            signature,
        })
    }

    /// Destroys the payloads of every matching record and appends a signed
    /// tombstone naming them.
    pub fn erase(&self, scope: EraseScope) -> Result<AuditRecord, AuditError> {
        let tomb = {
            let mut st = self.state.lock();
            let mut erased = Vec::new();
            let mut leaves = Vec::new();
            for i in 0..st.records.len() {
                let r = &st.records[i];
                if scope.matches(r) && r.event != EventKind::Erasure && st.payloads[i].is_some() {
                    erased.push(r.record_id);
                    leaves.push(r.this_hash);
                    st.payloads[i] = None;
                    st.ciphertexts[i].clear();
                }
            }
            if let Some(path) = st.path.clone() {
                let mut out = store::MAGIC.to_vec();
                for (r, ct) in st.records.iter().zip(&st.ciphertexts) {
                    out.extend_from_slice(&store::record_frame(r, ct));
                }
                let tmp = path.with_extension("rewrite");
                fs::write(&tmp, out).map_err(io_err)?;
                fs::rename(&tmp, &path).map_err(io_err)?;
            }
            let root = merkle_root(&leaves).unwrap_or(Digest::ZERO);
            let signature = self.platform.device_sign(&Tombstone::signed_body(&scope, &erased, &root))?;
            Tombstone {
                scope: scope.clone(),
                erased,
                erased_root: root,
                signature,
            }
        };
        let session = match scope {
            EraseScope::Session(s) => s,
            _ => TokenId::NONE,
        };
        let payload = serde_json::to_vec(&tomb).expect("tombstone serializes");
        self.append(NewRecord {
            session,
            actor: Digest::ZERO,
            event: EventKind::Erasure,
            severity: Severity::Warn,
            payload: &payload,
        })
    }

    /// Human-readable transparency report for one session. `describe` turns a
    /// record and its payload into the text after the fixed prefix.
    pub fn summarize(
        &self,
        session: TokenId,
        actor_name: impl Fn(&Digest) -> String,
        describe: impl Fn(&AuditRecord, Option<&[u8]>) -> String,
    ) -> Result<String, AuditError> {
        let st = self.state.lock();
        if !st.records.iter().any(|r| r.session == session) {
            return Err(AuditError::UnknownSession(session));
        }
        let mut out = format!("session {session}\n");
        for (r, p) in st.records.iter().zip(&st.payloads) {
            if r.session != session || (p.is_none() && r.event != EventKind::Erasure) {
                continue;
            }
            let marker = if r.severity == Severity::Critical { '!' } else { ' ' };
            out.push_str(&format!(
                "{marker} #{:<5} {:<16} {:<16} {:<8} {}\n",
                r.record_id,
                actor_name(&r.actor),
                r.event.name(),
                r.severity.name(),
                describe(r, p.as_deref())
            ));
        }
        Ok(out)
    }
}

/// Full verification of serialized store bytes: frame structure, hash chain,
/// signed checkpoint, payload authenticity, and tombstone coverage of every
/// erased payload. `open` decrypts one payload.
pub fn verify_serialized(
    bytes: &[u8],
    device_key: &PublicKey,
    open: impl Fn(&AuditRecord, &[u8; 12], &[u8]) -> Option<Vec<u8>>,
) -> ChainStatus {
    let Ok(parsed) = store::parse(bytes) else {
        return ChainStatus::Corrupt;
    };
    let records: Vec<AuditRecord> = parsed.records.iter().map(|s| s.record.clone()).collect();
    if let broken @ ChainStatus::Broken { .. } = verify_chain(&records) {
        return broken;
    }
    let n = records.len() as u64;
    let Some(cp) = parsed.checkpoint else {
        return ChainStatus::Broken { at: n + 1 };
    };
    if !verify(device_key, &Checkpoint::body(cp.count, &cp.head), &cp.signature) {
        return ChainStatus::Corrupt;
    }
    let head = records.last().map(|r| r.this_hash).unwrap_or_else(genesis);
    if cp.count != n || cp.head != head {
        return ChainStatus::Broken { at: n.min(cp.count) + 1 };
    }
    let mut covered = HashSet::new();
    let mut blank = Vec::new();
    for s in &parsed.records {
        if s.ciphertext.is_empty() {
            blank.push(s.record.record_id);
            continue;
        }
        let ok = s.nonce == store::nonce_for(&s.record.this_hash)
            && open(&s.record, &s.nonce, &s.ciphertext).is_some_and(|pt| {
                if s.record.event == EventKind::Erasure {
                    if let Ok(t) = serde_json::from_slice::<Tombstone>(&pt) {
                        covered.extend(t.erased.iter().copied());
                    }
                }
                hash(&pt) == s.record.payload_digest
            });
        if !ok {
            return ChainStatus::Broken { at: s.record.record_id };
        }
    }
    match blank.into_iter().find(|id| !covered.contains(id)) {
        Some(at) => ChainStatus::Broken { at },
        None => ChainStatus::Intact,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{BootImages, ExpectedMeasurements};

    fn platform() -> Arc<Platform> {
        let p = Platform::new(3);
        let img = BootImages::reference();
        assert!(p.secure_boot(&img, &ExpectedMeasurements::from_images(&img)).is_online());
        Arc::new(p)
    }

    fn add(log: &AuditLog, session: u128, event: EventKind, severity: Severity, payload: &str) -> AuditRecord {
        log.append(NewRecord {
            session: TokenId(session),
            actor: hash(format!("actor{}", session % 3).as_bytes()),
            event,
            severity,
            payload: payload.as_bytes(),
        })
        .unwrap()
    }

    fn sample(log: &AuditLog) {
        add(log, 1, EventKind::UserInstruction, Severity::Info, "book a train");
        add(log, 1, EventKind::SensitiveOp, Severity::Info, "pay 40 EUR");
        add(log, 2, EventKind::AaResponse, Severity::Info, "results");
        add(log, 1, EventKind::Decision, Severity::Info, "direct pass");
    }

    #[test]
    fn chain_links_and_sensitive_ops_are_critical() {
        let log = AuditLog::in_memory(platform()).unwrap();
        let a = add(&log, 1, EventKind::UserInstruction, Severity::Info, "x");
        let b = add(&log, 1, EventKind::SensitiveOp, Severity::Info, "pay");
        assert_eq!(a.prev_hash, genesis());
        assert_eq!(b.prev_hash, a.this_hash);
        assert_eq!(b.severity, Severity::Critical);
        assert_eq!(a.event, EventKind::UserInstruction);
        assert_eq!(log.verify(), ChainStatus::Intact);
    }

    #[test]
    fn deleting_record_k_breaks_at_k_plus_one() {
        let log = AuditLog::in_memory(platform()).unwrap();
        sample(&log);
        let mut recs = log.records();
        recs.remove(1);
        assert_eq!(verify_chain(&recs), ChainStatus::Broken { at: 2 });
        let mut recs = log.records();
        recs.remove(2);
        // Record 4 now sits at position 3.
        assert_eq!(verify_chain(&recs), ChainStatus::Broken { at: 3 });
    }

    #[test]
    fn editing_payload_digest_breaks_at_that_record() {
        let log = AuditLog::in_memory(platform()).unwrap();
        sample(&log);
        for k in 0..4 {
            let mut recs = log.records();
            recs[k].payload_digest.0[0] ^= 1;
            assert_eq!(verify_chain(&recs), ChainStatus::Broken { at: k as u64 + 1 });
        }
    }

    #[test]
    fn truncated_tail_detected_by_checkpoint() {
        let log = AuditLog::in_memory(platform()).unwrap();
        sample(&log);
        let full = log.serialize().unwrap();
        assert_eq!(log.verify_serialized(&full).unwrap(), ChainStatus::Intact);
        let parsed = store::parse(&full).unwrap();
        let mut cut = store::MAGIC.to_vec();
        for s in &parsed.records[..3] {
            cut.extend_from_slice(&store::record_frame(&s.record, &s.ciphertext));
        }
        cut.extend_from_slice(&parsed.checkpoint.unwrap().frame());
        assert_eq!(log.verify_serialized(&cut).unwrap(), ChainStatus::Broken { at: 4 });
    }

    #[test]
    fn export_matches_recomputation_and_signature() {
        let p = platform();
        let log = AuditLog::in_memory(p.clone()).unwrap();
        sample(&log);
        let e = log.export(1, 4).unwrap();
        let recs = log.records();
        assert!(verify_export(&e, &recs, &p.device_public_key().unwrap()));
        let mut swapped = recs.clone();
        swapped[2].this_hash.0[3] ^= 4;
        assert!(!verify_export(&e, &swapped, &p.device_public_key().unwrap()));
        assert!(matches!(log.export(3, 2), Err(AuditError::BadRange(3, 2))));
        assert!(matches!(log.export(1, 9), Err(AuditError::BadRange(1, 9))));
    }

    #[test]
    fn summarize_marks_critical_and_orders_by_id() {
        let log = AuditLog::in_memory(platform()).unwrap();
        sample(&log);
        let report = log
            .summarize(TokenId(1), |_| "agent".into(), |_, p| String::from_utf8_lossy(p.unwrap_or_default()).into())
            .unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("session "));
        assert!(lines[1].contains("book a train"));
        assert!(lines[2].starts_with('!') && lines[2].contains("CRITICAL"));
        assert!(lines[3].starts_with(' '));
        assert!(matches!(
            log.summarize(TokenId(77), |_| String::new(), |_, _| String::new()),
            Err(AuditError::UnknownSession(_))
        ));
    }

    #[test]
    fn erase_session_leaves_tombstone_and_intact_chain() {
        let p = platform();
        let log = AuditLog::in_memory(p.clone()).unwrap();
        sample(&log);
        let before = log.export(1, 4).unwrap();
        let tomb = log.erase(EraseScope::Session(TokenId(1))).unwrap();
        assert_eq!(tomb.event, EventKind::Erasure);
        assert_eq!(log.verify(), ChainStatus::Intact);
        let report = log
            .summarize(TokenId(1), |_| "user".into(), |r, _| r.event.name().into())
            .unwrap();
        assert_eq!(report.lines().count(), 2);
        assert!(report.contains("ERASURE"));
        let recs = log.records();
        assert!(verify_export(&before, &recs, &p.device_public_key().unwrap()));
        let spanning = log.export(2, 5).unwrap();
        assert!(verify_export(&spanning, &recs, &p.device_public_key().unwrap()));
        let bytes = log.serialize().unwrap();
        assert_eq!(log.verify_serialized(&bytes).unwrap(), ChainStatus::Intact);
        let (_, payload) = &log.entries()[4];
        let t: Tombstone = serde_json::from_slice(payload.as_ref().unwrap()).unwrap();
        assert_eq!(t.erased, vec![1, 2, 4]);
        let leaves: Vec<Digest> = [0, 1, 3].iter().map(|i| recs[*i].this_hash).collect();
        assert_eq!(Some(t.erased_root), merkle_root(&leaves));
        assert!(verify(
            &p.device_public_key().unwrap(),
            &Tombstone::signed_body(&t.scope, &t.erased, &t.erased_root),
            &t.signature
        ));
    }

    #[test]
    fn blanking_a_payload_without_tombstone_is_detected() {
        let log = AuditLog::in_memory(platform()).unwrap();
        sample(&log);
        let parsed = store::parse(&log.serialize().unwrap()).unwrap();
        let mut out = store::MAGIC.to_vec();
        for (i, s) in parsed.records.iter().enumerate() {
            let ct: &[u8] = if i == 1 { &[] } else { &s.ciphertext };
            out.extend_from_slice(&store::record_frame(&s.record, ct));
        }
        out.extend_from_slice(&parsed.checkpoint.unwrap().frame());
        assert_eq!(log.verify_serialized(&out).unwrap(), ChainStatus::Broken { at: 2 });
    }

    #[test]
    fn persisted_store_reopens_and_hides_plaintext() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.store");
        let p = platform();
        {
            let log = AuditLog::open(p.clone(), &path).unwrap();
            add(&log, 1, EventKind::UserInstruction, Severity::Info, "card 4111111111111111 secret-memo");
            add(&log, 1, EventKind::Decision, Severity::Info, "ok");
        }
        let raw = fs::read(&path).unwrap();
        let needle = b"4111111111111111";
        assert!(!raw.windows(needle.len()).any(|w| w == needle));
        let log = AuditLog::open(p.clone(), &path).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.entries()[0].1.as_deref(), Some(&b"card 4111111111111111 secret-memo"[..]));
        log.erase(EraseScope::All).unwrap();
        drop(log);
        let log = AuditLog::open(p, &path).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.entries()[0].1.is_none());
    }

    #[test]
    fn reopening_a_tampered_store_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.store");
        let p = platform();
        {
            let log = AuditLog::open(p.clone(), &path).unwrap();
            sample(&log);
        }
        let mut raw = fs::read(&path).unwrap();
        let at = raw.len() - 5;
        raw[at] ^= 0x40;
        fs::write(&path, raw).unwrap();
        assert!(AuditLog::open(p, &path).is_err());
    }
}
