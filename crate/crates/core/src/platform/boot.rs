//! Secure-boot measurement chain and device attestation tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{hash, verify, Digest, Encoder, PublicKey, Signature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BootStage {
    BootRom,
    Bootloader,
    OsImage,
    KernelModule,
    PolicyConfig,
}

impl BootStage {
    /// Chain order; measurement always proceeds in this order.
    pub const CHAIN: [BootStage; 5] = [
        BootStage::BootRom,
        BootStage::Bootloader,
        BootStage::OsImage,
        BootStage::KernelModule,
        BootStage::PolicyConfig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BootStage::BootRom => "boot-rom",
            BootStage::Bootloader => "bootloader",
            BootStage::OsImage => "os-image",
            BootStage::KernelModule => "kernel-module",
            BootStage::PolicyConfig => "policy-config",
        }
    }
}

impl fmt::Display for BootStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BootStage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::CHAIN
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown boot stage '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub stage: BootStage,
    pub digest: Digest,
}

/// Byte images for each boot stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootImages(pub BTreeMap<BootStage, Vec<u8>>);

impl BootImages {
    /// The reference firmware set shipped with the simulator.
    pub fn reference() -> Self {
        Self(
            BootStage::CHAIN
                .into_iter()
                .map(|s| (s, format!("aura reference image: {} v1.0", s.name()).into_bytes()))
                .collect(),
        )
    }

    /// Copy with one byte of `stage`'s image perturbed.
    pub fn tampered(&self, stage: BootStage) -> Self {
        let mut out = self.clone();
        if let Some(img) = out.0.get_mut(&stage) {
            match img.first_mut() {
                Some(b) => *b ^= 0x01,
                None => img.push(0),
            }
        }
        out
    }
}

/// Fused expected digests, one per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedMeasurements(pub BTreeMap<BootStage, Digest>);

impl ExpectedMeasurements {
    pub fn from_images(images: &BootImages) -> Self {
        Self(images.0.iter().map(|(s, img)| (*s, hash(img))).collect())
    }

    /// Parses the text table format: one `<stage-name> <hex-digest>` per line,
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut out = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(stage), Some(digest), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("line {}: expected '<stage> <hex digest>'", n + 1));
            };
            let stage: BootStage = stage.parse().map_err(|e| format!("line {}: {e}", n + 1))?;
            let digest = Digest::from_hex(digest).map_err(|e| format!("line {}: {e}", n + 1))?;
            if out.insert(stage, digest).is_some() {
                return Err(format!("line {}: duplicate stage {stage}", n + 1));
            }
        }
        Ok(Self(out))
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# stage          sha256\n");
        for (stage, d) in &self.0 {
            s.push_str(&format!("{:<16} {}\n", stage.name(), d));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationToken {
    pub measurements: Vec<Measurement>,
    pub device_key_fingerprint: Digest,
    pub nonce: Vec<u8>,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BootOutcome {
    Online(AttestationToken),
    /// `stage` is the first mismatching stage, or `None` when the platform had
    /// already failed closed.
    FailClosed { stage: Option<BootStage> },
}

impl BootOutcome {
    pub fn is_online(&self) -> bool {
        matches!(self, BootOutcome::Online(_))
    }
}

pub(super) fn measure_chain(images: &BootImages, expected: &ExpectedMeasurements) -> Result<Vec<Measurement>, BootStage> {
    BootStage::CHAIN
        .into_iter()
        .map(|stage| {
            let image = images.0.get(&stage).ok_or(stage)?;
            let digest = hash(image);
            match expected.0.get(&stage) {
                Some(want) if *want == digest => Ok(Measurement { stage, digest }),
                _ => Err(stage),
            }
        })
        .collect()
}

pub(super) fn attestation_body(measurements: &[Measurement], fingerprint: &Digest, nonce: &[u8]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("aura.attestation.v1");
    enc.list(measurements.iter(), |e, m| {
        e.str(m.stage.name()).digest(&m.digest);
    });
    enc.digest(fingerprint).bytes(nonce);
    enc.finish()
}

/// Checks an attestation token against the device key and the nonce the
/// verifier issued.
pub fn verify_attestation(token: &AttestationToken, device_key: &PublicKey, nonce: &[u8]) -> bool {
    token.nonce == nonce
        && token.device_key_fingerprint == hash(&device_key.0)
        && verify(
            device_key,
            &attestation_body(&token.measurements, &token.device_key_fingerprint, nonce),
            &token.signature,
        )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::Platform;

    fn online() -> (Platform, PublicKey) {
        let p = Platform::new(11);
        let images = BootImages::reference();
        assert!(p.secure_boot(&images, &ExpectedMeasurements::from_images(&images)).is_online());
        let pk = p.device_public_key().unwrap();
        (p, pk)
    }

    #[test]
    fn all_stages_match_goes_online() {
        let (p, pk) = online();
        let t = p.issue_attestation(b"n1").unwrap();
        assert_eq!(t.measurements.len(), 5);
        assert_eq!(
            t.measurements.iter().map(|m| m.stage).collect::<Vec<_>>(),
            BootStage::CHAIN.to_vec()
        );
        assert!(verify_attestation(&t, &pk, b"n1"));
    }

    #[test]
    fn each_tampered_stage_fails_closed() {
        for stage in BootStage::CHAIN {
            let p = Platform::new(1);
            let images = BootImages::reference();
            let out = p.secure_boot(&images.tampered(stage), &ExpectedMeasurements::from_images(&images));
            assert_eq!(out, BootOutcome::FailClosed { stage: Some(stage) });
        }
    }

    #[test]
    fn tampered_measurement_breaks_attestation() {
        let (p, pk) = online();
        let t = p.issue_attestation(b"n").unwrap();
        for i in 0..t.measurements.len() {
            for byte in 0..32 {
                let mut bad = t.clone();
                bad.measurements[i].digest.0[byte] ^= 0x80;
                assert!(!verify_attestation(&bad, &pk, b"n"));
            }
        }
        let mut bad = t.clone();
        bad.device_key_fingerprint.0[0] ^= 1;
        assert!(!verify_attestation(&bad, &pk, b"n"));
    }

    #[test]
    fn nonce_replay_rejected() {
        let (p, pk) = online();
        let t = p.issue_attestation(b"fresh").unwrap();
        assert!(!verify_attestation(&t, &pk, b"other"));
    }

    #[test]
    fn measurement_table_round_trip() {
        let m = ExpectedMeasurements::from_images(&BootImages::reference());
        assert_eq!(ExpectedMeasurements::parse(&m.render()).unwrap(), m);
        assert!(ExpectedMeasurements::parse("boot-rom zz").is_err());
        assert!(ExpectedMeasurements::parse("nope 00").is_err());
    }

    #[test]
    fn missing_expected_stage_fails_closed() {
        let images = BootImages::reference();
        let mut exp = ExpectedMeasurements::from_images(&images);
        exp.0.remove(&BootStage::PolicyConfig);
        let p = Platform::new(2);
        assert_eq!(
            p.secure_boot(&images, &exp),
            BootOutcome::FailClosed { stage: Some(BootStage::PolicyConfig) }
        );
    }
}
