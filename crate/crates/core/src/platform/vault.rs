use std::collections::HashMap;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::{Signer, SigningKey};
use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

use super::boot::{self, AttestationToken, BootImages, BootOutcome, ExpectedMeasurements};
use super::{hash_fields, Digest, PlatformError, ProcessIdentity, PublicKey, Signature};

/// The principal a key is bound to.
///
/// Agent keys bind to the OS principal (uid plus package signature) rather than
/// a pid, so a restarted process of the same agent can still prove possession;
/// per-pid binding is enforced by session tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyOwner {
    Platform,
    Principal { uid: u32, code_fingerprint: Digest },
}

impl KeyOwner {
    pub fn of(process: &ProcessIdentity) -> Self {
        KeyOwner::Principal {
            uid: process.uid,
            code_fingerprint: process.code_fingerprint,
        }
    }
}

/// Opaque reference to key material held inside the vault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyHandle {
    id: u128,
    owner: KeyOwner,
}

impl KeyHandle {
    pub fn id(&self) -> u128 {
        self.id
    }

    pub fn owner(&self) -> KeyOwner {
        self.owner
    }
}

/// Who is asking the vault to exercise a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Caller {
    Kernel,
    Process(ProcessIdentity),
}

enum Material {
    Signing(SigningKey),
    Secret([u8; 32]),
}

struct KeyEntry {
    owner: KeyOwner,
    material: Material,
}

pub(super) enum BootState {
    Pending,
    Online {
        measurements: Vec<boot::Measurement>,
        attestation: KeyHandle,
    },
    FailClosed,
}

struct State {
    rng: ChaCha20Rng,
    device_secret: [u8; 32],
    keys: HashMap<u128, KeyEntry>,
    boot: BootState,
}

/// The simulated TEE: key vault plus boot and attestation state.
pub struct Platform {
    state: Mutex<State>,
}

impl Platform {
    pub fn new(seed: u64) -> Self {
        let device_secret = hash_fields(&[b"aura.device-secret", &seed.to_be_bytes()]).0;
        Self {
            state: Mutex::new(State {
                rng: ChaCha20Rng::seed_from_u64(seed),
                device_secret,
                keys: HashMap::new(),
                boot: BootState::Pending,
            }),
        }
    }

    /// Measures every stage in chain order and either comes online or fails
    /// closed. Failure is permanent for this platform instance.
    pub fn secure_boot(&self, images: &BootImages, expected: &ExpectedMeasurements) -> BootOutcome {
        let mut st = self.state.lock();
        if matches!(st.boot, BootState::FailClosed) {
            return BootOutcome::FailClosed { stage: None };
        }
        match boot::measure_chain(images, expected) {
            Ok(measurements) => {
                let secret = st.device_secret;
                let attestation = Self::derive_signing(&mut st, &secret, "device-attestation", KeyOwner::Platform);
                st.boot = BootState::Online {
                    measurements,
                    attestation,
                };
                drop(st);
                match self.issue_attestation(b"boot") {
                    Ok(token) => BootOutcome::Online(token),
                    Err(_) => BootOutcome::FailClosed { stage: None },
                }
            }
            Err(stage) => {
                st.boot = BootState::FailClosed;
                st.keys.clear();
                BootOutcome::FailClosed { stage: Some(stage) }
            }
        }
    }

    pub fn is_online(&self) -> bool {
        matches!(self.state.lock().boot, BootState::Online { .. })
    }

    pub fn require_online(&self) -> Result<(), PlatformError> {
        if self.is_online() {
            Ok(())
        } else {
            Err(PlatformError::KernelUnavailable)
        }
    }

    pub fn issue_attestation(&self, nonce: &[u8]) -> Result<AttestationToken, PlatformError> {
        let st = self.state.lock();
        let BootState::Online {
            measurements,
            attestation,
        } = &st.boot
        else {
            return Err(PlatformError::KernelUnavailable);
        };
        let key = Self::signing_key(&st, attestation)?;
        let fingerprint = super::hash(key.verifying_key().as_bytes());
        let body = boot::attestation_body(measurements, &fingerprint, nonce);
        Ok(AttestationToken {
            measurements: measurements.clone(),
            device_key_fingerprint: fingerprint,
            nonce: nonce.to_vec(),
            signature: Signature(key.sign(&body).to_bytes()),
        })
    }

    pub fn device_public_key(&self) -> Result<PublicKey, PlatformError> {
        let st = self.state.lock();
        let BootState::Online { attestation, .. } = &st.boot else {
            return Err(PlatformError::KernelUnavailable);
        };
        Ok(PublicKey(Self::signing_key(&st, attestation)?.verifying_key().to_bytes()))
    }

    /// Signs with the device attestation key. Kernel-internal.
    pub fn device_sign(&self, msg: &[u8]) -> Result<Signature, PlatformError> {
        let st = self.state.lock();
        let BootState::Online { attestation, .. } = &st.boot else {
            return Err(PlatformError::KernelUnavailable);
        };
        Ok(Signature(Self::signing_key(&st, attestation)?.sign(msg).to_bytes()))
    }

    /// Generates a fresh Ed25519 key pair inside the vault.
    pub fn generate_keypair(&self, owner: KeyOwner) -> Result<(KeyHandle, PublicKey), PlatformError> {
        let mut st = self.state.lock();
        Self::unsealed(&st)?;
        let mut seed = [0u8; 32];
        st.rng.fill_bytes(&mut seed);
        let key = SigningKey::from_bytes(&seed);
        let public = PublicKey(key.verifying_key().to_bytes());
        let handle = Self::insert(&mut st, owner, Material::Signing(key));
        Ok((handle, public))
    }

    /// Derives a 256-bit symmetric key from the fused device secret. The same
    /// label always yields the same key on the same device.
    pub fn derive_secret(&self, label: &str, owner: KeyOwner) -> Result<KeyHandle, PlatformError> {
        let mut st = self.state.lock();
        Self::unsealed(&st)?;
        let key = hash_fields(&[&st.device_secret, b"secret", label.as_bytes()]).0;
        Ok(Self::insert(&mut st, owner, Material::Secret(key)))
    }

    pub fn public_key(&self, handle: &KeyHandle) -> Result<PublicKey, PlatformError> {
        let st = self.state.lock();
        Ok(PublicKey(Self::signing_key(&st, handle)?.verifying_key().to_bytes()))
    }

    pub fn vault_sign(&self, handle: &KeyHandle, caller: Caller, msg: &[u8]) -> Result<Signature, PlatformError> {
        let st = self.state.lock();
        Self::unsealed(&st)?;
        let entry = Self::authorized(&st, handle, caller)?;
        match &entry.material {
            Material::Signing(k) => Ok(Signature(k.sign(msg).to_bytes())),
            Material::Secret(_) => Err(PlatformError::WrongKeyType),
        }
    }

    /// HMAC-SHA256 under a vault-held secret.
    pub fn vault_mac(&self, handle: &KeyHandle, caller: Caller, msg: &[u8]) -> Result<Digest, PlatformError> {
        let st = self.state.lock();
        Self::unsealed(&st)?;
        let key = Self::secret(&st, handle, caller)?;
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(msg);
        Ok(Digest(mac.finalize().into_bytes().into()))
    }

    /// ChaCha20-Poly1305 encryption under a vault-held secret.
    pub fn vault_seal(
        &self,
        handle: &KeyHandle,
        caller: Caller,
        nonce: &[u8; 12],
        aad: &[u8],
        plaintext: &[u8],
    ) -> Result<Vec<u8>, PlatformError> {
        let st = self.state.lock();
        Self::unsealed(&st)?;
        let cipher = ChaCha20Poly1305::new(Self::secret(&st, handle, caller)?.into());
        cipher
            .encrypt(nonce.into(), Payload { msg: plaintext, aad })
            .map_err(|_| PlatformError::Decrypt)
    }

    pub fn vault_open(
        &self,
        handle: &KeyHandle,
        caller: Caller,
        nonce: &[u8; 12],
        aad: &[u8],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, PlatformError> {
        let st = self.state.lock();
        Self::unsealed(&st)?;
        let cipher = ChaCha20Poly1305::new(Self::secret(&st, handle, caller)?.into());
        cipher
            .decrypt(nonce.into(), Payload { msg: ciphertext, aad })
            .map_err(|_| PlatformError::Decrypt)
    }

    fn unsealed(st: &State) -> Result<(), PlatformError> {
        match st.boot {
            BootState::FailClosed => Err(PlatformError::VaultSealed),
            _ => Ok(()),
        }
    }

    fn insert(st: &mut State, owner: KeyOwner, material: Material) -> KeyHandle {
        loop {
            let mut id = [0u8; 16];
            st.rng.fill_bytes(&mut id);
            let id = u128::from_be_bytes(id);
            if !st.keys.contains_key(&id) {
                st.keys.insert(id, KeyEntry { owner, material });
                return KeyHandle { id, owner };
            }
        }
    }

    fn derive_signing(st: &mut State, secret: &[u8; 32], label: &str, owner: KeyOwner) -> KeyHandle {
        let seed = hash_fields(&[secret, b"signing", label.as_bytes()]).0;
        Self::insert(st, owner, Material::Signing(SigningKey::from_bytes(&seed)))
    }

    fn authorized<'s>(st: &'s State, handle: &KeyHandle, caller: Caller) -> Result<&'s KeyEntry, PlatformError> {
        let entry = st.keys.get(&handle.id).ok_or(PlatformError::UnknownHandle)?;
        // The handle's claimed owner is not trusted; the vault's record is.
        let allowed = match (entry.owner, caller) {
            (KeyOwner::Platform, Caller::Kernel) => true,
            (KeyOwner::Principal { uid, code_fingerprint }, Caller::Process(p)) => {
                p.uid == uid && p.code_fingerprint == code_fingerprint
            }
            _ => false,
        };
        if allowed {
            Ok(entry)
        } else {
            Err(PlatformError::CallerMismatch)
        }
    }

    fn signing_key<'s>(st: &'s State, handle: &KeyHandle) -> Result<&'s SigningKey, PlatformError> {
        match &st.keys.get(&handle.id).ok_or(PlatformError::UnknownHandle)?.material {
            Material::Signing(k) => Ok(k),
            Material::Secret(_) => Err(PlatformError::WrongKeyType),
        }
    }

    fn secret<'s>(st: &'s State, handle: &KeyHandle, caller: Caller) -> Result<&'s [u8; 32], PlatformError> {
        match &Self::authorized(st, handle, caller)?.material {
            Material::Secret(k) => Ok(k),
            Material::Signing(_) => Err(PlatformError::WrongKeyType),
        }
    }
}
