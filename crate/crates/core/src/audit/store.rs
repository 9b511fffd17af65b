//! On-disk layout of the encrypted audit store.
//!
//! ```text
//! file   := MAGIC frame*
//! MAGIC  := "AURAAUD1"
//! frame  := len:u32be body
//! body   := field(record-index) field(nonce[12]) field(ciphertext)
//! ```
//!
//! The record index (ids, hashes, event, severity) stays in the clear so the
//! chain can be verified without the device key. Payloads are sealed with
//! ChaCha20-Poly1305 under a device-local vault key; the nonce is the first 12
//! bytes of `SHA-256("aura.audit.nonce" || this_hash)` and `this_hash` is the
//! associated data. An erased payload has an empty ciphertext.
//!
//! The signed checkpoint lives next to the store (`<store>.head`) and in
//! serialized logs as a trailing frame whose index field is empty:
//! `field("") field(count:u64 || head_hash) field(signature)`.

use super::AuditRecord;
use crate::platform::{hash_fields, DecodeError, Decoder, Digest, Encoder, Signature};

pub const MAGIC: &[u8; 8] = b"AURAAUD1";

pub fn nonce_for(this_hash: &Digest) -> [u8; 12] {
    let d = hash_fields(&[b"aura.audit.nonce", this_hash.as_bytes()]);
    d.0[..12].try_into().expect("12 bytes")
}

pub fn record_frame(rec: &AuditRecord, ciphertext: &[u8]) -> Vec<u8> {
    let body = Encoder::new()
        .bytes(&rec.encode())
        .bytes(&nonce_for(&rec.this_hash))
        .bytes(ciphertext)
        .finish();
    Encoder::new().bytes(&body).finish()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub count: u64,
    pub head: Digest,
    pub signature: Signature,
}

impl Checkpoint {
    pub fn body(count: u64, head: &Digest) -> Vec<u8> {
        Encoder::new().str("aura.audit.checkpoint.v1").u64(count).digest(head).finish()
    }

    pub fn frame(&self) -> Vec<u8> {
        let body = Encoder::new()
            .bytes(&[])
            .bytes(&Encoder::new().u64(self.count).digest(&self.head).finish())
            .bytes(self.signature.as_bytes())
            .finish();
        Encoder::new().bytes(&body).finish()
    }
}

pub struct StoredRecord {
    pub record: AuditRecord,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

pub struct ParsedStore {
    pub records: Vec<StoredRecord>,
    pub checkpoint: Option<Checkpoint>,
}

pub fn parse(bytes: &[u8]) -> Result<ParsedStore, DecodeError> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| DecodeError::Invalid("bad audit store magic".into()))?;
    let mut frames = Decoder::new(rest);
    let mut records = Vec::new();
    let mut checkpoint = None;
    while !frames.is_empty() {
        if checkpoint.is_some() {
            return Err(DecodeError::Invalid("frames after checkpoint".into()));
        }
        let mut d = Decoder::new(frames.bytes()?);
        let index = d.bytes()?;
        if index.is_empty() {
            let mut c = Decoder::new(d.bytes()?);
            let count = c.u64()?;
            let head = c.digest()?;
            c.finish()?;
            checkpoint = Some(Checkpoint {
                count,
                head,
                signature: Signature(d.array()?),
            });
        } else {
            let record = AuditRecord::decode(index)?;
            let nonce = d.array()?;
            let ciphertext = d.bytes()?.to_vec();
            records.push(StoredRecord {
                record,
                nonce,
                ciphertext,
            });
        }
        d.finish()?;
    }
    Ok(ParsedStore { records, checkpoint })
}
