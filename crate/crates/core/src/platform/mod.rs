//! Simulated hardware root of trust.
//!
//! Provides the fixed digest (SHA-256), the signature scheme (Ed25519), a key
//! vault that only ever hands out opaque handles, the secure-boot measurement
//! chain and device attestation. The vault and boot state live behind one
//! lock; every operation is callable concurrently.

mod boot;
pub mod encoding;
mod vault;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use boot::{
    verify_attestation, AttestationToken, BootImages, BootOutcome, BootStage, ExpectedMeasurements,
    Measurement,
};
pub use encoding::{DecodeError, Decoder, Encoder};
pub use vault::{Caller, KeyHandle, KeyOwner, Platform};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlatformError {
    #[error("agent kernel unavailable: platform is not booted or failed closed")]
    KernelUnavailable,
    #[error("key vault sealed after failed boot")]
    VaultSealed,
    #[error("unknown key handle")]
    UnknownHandle,
    #[error("caller does not own the key handle")]
    CallerMismatch,
    #[error("key handle does not support this operation")]
    WrongKeyType,
    #[error("authenticated decryption failed")]
    Decrypt,
}

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s.trim(), &mut out)?;
                Ok(Self(out))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = hex::FromHexError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::from_hex(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_bytes!(Digest, 32);
hex_bytes!(PublicKey, 32);
hex_bytes!(Signature, 64);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);
}

/// SHA-256 of `data`.
pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 over several parts, each length-prefixed.
pub fn hash_fields(fields: &[&[u8]]) -> Digest {
    let mut enc = Encoder::new();
    for f in fields {
        enc.bytes(f);
    }
    hash(&enc.finish())
}

/// Verifies an Ed25519 signature. Malformed keys verify as false.
pub fn verify(key: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    vk.verify_strict(msg, &ed25519_dalek::Signature::from_bytes(&sig.0))
        .is_ok()
}

/// OS-level identity of a running process, captured by the platform and never
/// self-reported by an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProcessIdentity {
    pub pid: u32,
    pub uid: u32,
    pub code_fingerprint: Digest,
}

impl ProcessIdentity {
    pub fn new(pid: u32, uid: u32, code_fingerprint: Digest) -> Self {
        Self {
            pid,
            uid,
            code_fingerprint,
        }
    }
}

impl fmt::Display for ProcessIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pid={} uid={} code={}",
            self.pid,
            self.uid,
            &self.code_fingerprint.to_hex()[..12]
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_digest_matches_published_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_is_deterministic() {
        assert_eq!(hash(b"a"), hash(b"a"));
    }

    #[test]
    fn all_single_byte_inputs_have_distinct_digests() {
        let digests: std::collections::HashSet<Digest> =
            (0u8..=255).map(|b| hash(&[b])).collect();
        assert_eq!(digests.len(), 256);
    }

    #[test]
    fn hex_round_trip() {
        let d = hash(b"x");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }
}
