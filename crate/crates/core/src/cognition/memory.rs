use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::alignment::PlannedAction;
use crate::approval::{ApprovalDecision, ApprovalKind, ApprovalProvider, ApprovalRequest};
use crate::platform::{Caller, DecodeError, Decoder, Digest, Encoder, KeyHandle, KeyOwner, Platform, PlatformError};
use crate::registry::AgentDid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId(pub u64);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaintTag {
    #[serde(rename = "TAG_VERIFIED")]
    Verified,
    #[serde(rename = "TAG_TAINTED")]
    Tainted,
}

impl TaintTag {
    pub fn name(self) -> &'static str {
        match self {
            TaintTag::Verified => "TAG_VERIFIED",
            TaintTag::Tainted => "TAG_TAINTED",
        }
    }

    /// Lattice join: tainted absorbs.
    pub fn join(self, other: TaintTag) -> TaintTag {
        if self == TaintTag::Tainted || other == TaintTag::Tainted {
            TaintTag::Tainted
        } else {
            TaintTag::Verified
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    User,
    Agent(AgentDid),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::User => f.write_str("USER"),
            Origin::Agent(d) => write!(f, "{d}"),
        }
    }
}

/// Entry point of data into memory; decides the tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    User,
    VerifiedSa(AgentDid),
    External(AgentDid),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryCell {
    pub cell_id: CellId,
    pub content: String,
    pub tag: TaintTag,
    pub origin: Origin,
    pub derivation: Vec<CellId>,
    /// Set on cells created by declassification.
    pub via_declassify: bool,
    pub integrity_mac: Digest,
}

impl MemoryCell {
    fn mac_body(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str("aura.cell.v1")
            .u64(self.cell_id.0)
            .str(&self.content)
            .str(self.tag.name())
            .str(&self.origin.to_string());
        e.list(self.derivation.iter(), |e, c| {
            e.u64(c.0);
        });
        e.u8(self.via_declassify as u8).finish()
    }

    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.cell_id.0)
            .str(&self.content)
            .u8(self.tag as u8)
            .str(&self.origin.to_string());
        e.list(self.derivation.iter(), |e, c| {
            e.u64(c.0);
        });
        e.u8(self.via_declassify as u8).digest(&self.integrity_mac).finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let cell_id = CellId(d.u64()?);
        let content = d.str()?.to_string();
        let tag = match d.u8()? {
            0 => TaintTag::Verified,
            1 => TaintTag::Tainted,
            t => return Err(DecodeError::Invalid(format!("tag {t}"))),
        };
        let origin = match d.str()? {
            "USER" => Origin::User,
            s => Origin::Agent(s.parse().map_err(|_| DecodeError::Invalid("origin".into()))?),
        };
        let n = d.count()?;
        let derivation = (0..n).map(|_| d.u64().map(CellId)).collect::<Result<_, _>>()?;
        let via_declassify = match d.u8()? {
            0 => false,
            1 => true,
            _ => return Err(DecodeError::Invalid("flag".into())),
        };
        let integrity_mac = d.digest()?;
        d.finish()?;
        Ok(Self {
            cell_id,
            content,
            tag,
            origin,
            derivation,
            via_declassify,
            integrity_mac,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CognitionError {
    #[error("unknown memory cell {0}")]
    UnknownCell(CellId),
    #[error("integrity check failed for cell {0}")]
    IntegrityViolation(CellId),
    #[error("declassification of cell {0} denied")]
    Denied(CellId),
    #[error("cell {0} is not tainted")]
    NotTainted(CellId),
    #[error("memory store file: {0}")]
    Store(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkVerdict {
    Clear,
    DeclassificationRequired(Vec<CellId>),
}

/// Kernel-held memory. Every cell carries a MAC under a vault secret; reads
/// verify it.
pub struct MemoryStore {
    platform: Arc<Platform>,
    key: KeyHandle,
    cells: RwLock<BTreeMap<CellId, MemoryCell>>,
}

const FILE_MAGIC: &[u8; 8] = b"AURAMEM1";

impl MemoryStore {
    pub fn new(platform: Arc<Platform>) -> Result<Self, CognitionError> {
        let key = platform.derive_secret("memory-integrity", KeyOwner::Platform)?;
        Ok(Self {
            platform,
            key,
            cells: RwLock::new(BTreeMap::new()),
        })
    }

    fn mac(&self, cell: &MemoryCell) -> Result<Digest, CognitionError> {
        Ok(self.platform.vault_mac(&self.key, Caller::Kernel, &cell.mac_body())?)
    }

    /// Whether `cell`'s MAC matches its contents.
    pub fn verify_cell(&self, cell: &MemoryCell) -> bool {
        self.mac(cell).is_ok_and(|m| m == cell.integrity_mac)
    }

    fn insert(
        &self,
        content: String,
        tag: TaintTag,
        origin: Origin,
        derivation: Vec<CellId>,
        via_declassify: bool,
    ) -> Result<MemoryCell, CognitionError> {
        let mut cells = self.cells.write();
        let cell_id = CellId(cells.keys().next_back().map_or(1, |c| c.0 + 1));
        let mut cell = MemoryCell {
            cell_id,
            content,
            tag,
            origin,
            derivation,
            via_declassify,
            integrity_mac: Digest::ZERO,
        };
        cell.integrity_mac = self.mac(&cell)?;
        cells.insert(cell_id, cell.clone());
        Ok(cell)
    }

    /// Tags by entry point: user input and the SA's own state are verified,
    /// anything from an app agent is tainted.
    pub fn store(&self, content: &str, source: Source) -> Result<MemoryCell, CognitionError> {
        let (tag, origin) = match source {
            Source::User => (TaintTag::Verified, Origin::User),
            Source::VerifiedSa(d) => (TaintTag::Verified, Origin::Agent(d)),
            Source::External(d) => (TaintTag::Tainted, Origin::Agent(d)),
        };
        self.insert(content.to_string(), tag, origin, Vec::new(), false)
    }

    /// New cell computed from `parents`; tainted iff any parent is.
    pub fn derive(&self, parents: &[CellId], content: &str) -> Result<MemoryCell, CognitionError> {
        let mut tag = TaintTag::Verified;
        let mut first = None;
        let mut tainted = None;
        for p in parents {
            let c = self.read(*p)?;
            tag = tag.join(c.tag);
            if c.tag == TaintTag::Tainted && tainted.is_none() {
                tainted = Some(c.origin.clone());
            }
            first.get_or_insert(c.origin);
        }
        let origin = tainted.or(first);
        self.insert(
            content.to_string(),
            tag,
            origin.unwrap_or(Origin::User),
            parents.to_vec(),
            false,
        )
    }

    /// Reads a cell, verifying its MAC.
    pub fn read(&self, id: CellId) -> Result<MemoryCell, CognitionError> {
        let c = self.cells.read().get(&id).cloned().ok_or(CognitionError::UnknownCell(id))?;
        if !self.verify_cell(&c) {
            return Err(CognitionError::IntegrityViolation(id));
        }
        Ok(c)
    }

    /// No-write-down: lists tainted parameters, each once, in parameter order.
    pub fn check_sink(&self, action: &PlannedAction) -> Result<SinkVerdict, CognitionError> {
        let mut tainted = Vec::new();
        let mut seen = BTreeSet::new();
        for id in action.params.values() {
            if self.read(*id)?.tag == TaintTag::Tainted && seen.insert(*id) {
                tainted.push(*id);
            }
        }
        Ok(if tainted.is_empty() {
            SinkVerdict::Clear
        } else {
            SinkVerdict::DeclassificationRequired(tainted)
        })
    }

    /// Asks the user to vouch for a tainted cell. Approval creates a new
    /// verified cell derived from it; the original is untouched.
    pub fn declassify(&self, id: CellId, approval: &dyn ApprovalProvider) -> Result<MemoryCell, CognitionError> {
        let c = self.read(id)?;
        if c.tag != TaintTag::Tainted {
            return Err(CognitionError::NotTainted(id));
        }
        let preview: String = c.content.chars().take(80).collect();
        let req = ApprovalRequest {
            kind: ApprovalKind::Declassify,
            subject: id.to_string(),
            card: format!("Use data from {} in a sensitive action? \"{preview}\"", c.origin),
        };
        match approval.decide(&req) {
            Ok(ApprovalDecision::Approve) => self.insert(c.content, TaintTag::Verified, c.origin, vec![id], true),
            _ => Err(CognitionError::Denied(id)),
        }
    }

    pub fn cells(&self) -> Vec<MemoryCell> {
        self.cells.read().values().cloned().collect()
    }

    /// Writes all cells, with their MACs, to a long-term store file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CognitionError> {
        let cells = self.cells.read();
        let mut out = FILE_MAGIC.to_vec();
        for c in cells.values() {
            out.extend_from_slice(&Encoder::new().bytes(&c.encode()).finish());
        }
        std::fs::write(path, out).map_err(|e| CognitionError::Store(e.to_string()))
    }

    /// Loads a store file; any cell whose MAC fails rejects the whole file.
    pub fn load(platform: Arc<Platform>, path: impl AsRef<Path>) -> Result<Self, CognitionError> {
        let bytes = std::fs::read(path).map_err(|e| CognitionError::Store(e.to_string()))?;
        let body = bytes
            .strip_prefix(FILE_MAGIC.as_slice())
            .ok_or_else(|| CognitionError::Store("bad magic".into()))?;
        let store = Self::new(platform)?;
        let mut d = Decoder::new(body);
        {
            let mut cells = store.cells.write();
            while !d.is_empty() {
                let c = MemoryCell::decode(d.bytes().map_err(|e| CognitionError::Store(e.to_string()))?)
                    .map_err(|e| CognitionError::Store(e.to_string()))?;
                if !store.verify_cell(&c) {
                    return Err(CognitionError::IntegrityViolation(c.cell_id));
                }
                cells.insert(c.cell_id, c);
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approval::ScriptedApproval;
    use crate::cognition::OpKind;
    use crate::exec::CriticalNodeCategory;
    use crate::platform::{hash, BootImages, ExpectedMeasurements};

    fn platform() -> Arc<Platform> {
        let p = Platform::new(5);
        let img = BootImages::reference();
        p.secure_boot(&img, &ExpectedMeasurements::from_images(&img));
        Arc::new(p)
    }

    fn web() -> AgentDid {
        AgentDid::new("web", hash(b"browser"), "u").unwrap()
    }

    fn action(params: &[(&str, CellId)]) -> PlannedAction {
        PlannedAction::new("send_message", OpKind::Critical(CriticalNodeCategory::NetworkEgress))
            .with_params(params.iter().map(|(k, v)| (k.to_string(), *v)))
    }

    #[test]
    fn tags_follow_entry_point() {
        let m = MemoryStore::new(platform()).unwrap();
        assert_eq!(m.store("book a train", Source::User).unwrap().tag, TaintTag::Verified);
        assert_eq!(m.store("<html>", Source::External(web())).unwrap().tag, TaintTag::Tainted);
        assert_eq!(m.store("clip", Source::External(web())).unwrap().tag, TaintTag::Tainted);
    }

    #[test]
    fn derivation_joins_tags() {
        let m = MemoryStore::new(platform()).unwrap();
        let v = m.store("a", Source::User).unwrap().cell_id;
        let v2 = m.store("b", Source::User).unwrap().cell_id;
        let t = m.store("c", Source::External(web())).unwrap().cell_id;
        assert_eq!(m.derive(&[v, v2], "ab").unwrap().tag, TaintTag::Verified);
        let mixed = m.derive(&[v, t], "ac").unwrap();
        assert_eq!(mixed.tag, TaintTag::Tainted);
        assert_eq!(mixed.origin, Origin::Agent(web()));
        let mut cur = t;
        for i in 0..10 {
            let c = m.derive(&[cur, v], &format!("step {i}")).unwrap();
            assert_eq!(c.tag, TaintTag::Tainted);
            cur = c.cell_id;
        }
        assert_eq!(m.derive(&[CellId(999)], "x"), Err(CognitionError::UnknownCell(CellId(999))));
    }

    #[test]
    fn sink_lists_only_tainted_params() {
        let m = MemoryStore::new(platform()).unwrap();
        let v = m.store("40 EUR", Source::User).unwrap().cell_id;
        let t = m.store("code 1234", Source::External(web())).unwrap().cell_id;
        assert_eq!(m.check_sink(&action(&[("amount", v)])).unwrap(), SinkVerdict::Clear);
        assert_eq!(
            m.check_sink(&action(&[("to", v), ("body", t)])).unwrap(),
            SinkVerdict::DeclassificationRequired(vec![t])
        );
    }

    #[test]
    fn declassify_creates_a_new_cell() {
        let m = MemoryStore::new(platform()).unwrap();
        let t = m.store("meeting at 5", Source::External(web())).unwrap().cell_id;
        let no = ScriptedApproval::with_default(ApprovalDecision::Deny);
        assert_eq!(m.declassify(t, &no), Err(CognitionError::Denied(t)));
        assert_eq!(m.declassify(t, &ScriptedApproval::empty()), Err(CognitionError::Denied(t)));
        assert!(matches!(m.check_sink(&action(&[("body", t)])).unwrap(), SinkVerdict::DeclassificationRequired(_)));
        let yes = ScriptedApproval::with_default(ApprovalDecision::Approve);
        let d = m.declassify(t, &yes).unwrap();
        assert_eq!(d.tag, TaintTag::Verified);
        assert_eq!(d.derivation, vec![t]);
        assert!(d.via_declassify);
        assert_eq!(m.read(t).unwrap().tag, TaintTag::Tainted);
        assert!(yes.prompts()[0].0.starts_with("declassify:"));
    }

    #[test]
    fn tag_flip_fails_mac() {
        let m = MemoryStore::new(platform()).unwrap();
        let mut c = m.store("x", Source::External(web())).unwrap();
        assert!(m.verify_cell(&c));
        c.tag = TaintTag::Verified;
        assert!(!m.verify_cell(&c));
    }

    #[test]
    fn persistence_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.bin");
        let p = platform();
        let m = MemoryStore::new(p.clone()).unwrap();
        let t = m.store("from web", Source::External(web())).unwrap();
        m.store("from user", Source::User).unwrap();
        m.save(&path).unwrap();
        let back = MemoryStore::load(p.clone(), &path).unwrap();
        assert_eq!(back.cells(), m.cells());
        assert_eq!(back.read(t.cell_id).unwrap().tag, TaintTag::Tainted);
        let mut raw = std::fs::read(&path).unwrap();
        // magic, outer length, id field, content field, then the tag field's prefix.
        let at = 8 + 4 + (4 + 8) + (4 + "from web".len()) + 4;
        assert_eq!(raw[at], 1);
        raw[at] = 0;
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(
            MemoryStore::load(p, &path),
            Err(CognitionError::IntegrityViolation(_))
        ));
    }
}
