//! Cryptographic primitives for row sharing.
//!
//! Three layers are provided:
//!
//! - **Row cipher**: AES-256-GCM over a serialized row, one random 96-bit
//!   nonce per encryption. Tampering with nonce, body or tag is detected at
//!   decrypt time.
//! - **Key wrap**: a row key encrypted to a receiver's X25519 public key
//!   (ephemeral-static Diffie-Hellman, HKDF-SHA256, AES-256-GCM). Only the
//!   holder of the matching private key can unwrap it.
//! - **Origin signatures**: Ed25519 over canonical record bytes.
//!
//! A [`KeyPair`] bundles one signing key and one key-agreement key; its
//! [`PublicKey`] is the 64-byte concatenation of both public halves.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as ExchangePublic, StaticSecret};

/// Row key length in bytes (256 bits).
pub const KEY_LEN: usize = 32;
/// AES-GCM nonce length in bytes.
pub const NONCE_LEN: usize = 12;
/// AES-GCM tag length in bytes.
pub const TAG_LEN: usize = 16;
/// Length of a serialized [`PublicKey`].
pub const PUBLIC_KEY_LEN: usize = 64;
/// Length of a serialized [`KeyPair`] secret.
pub const SECRET_KEY_LEN: usize = 64;
/// Length of an Ed25519 signature.
pub const SIGNATURE_LEN: usize = 64;
/// Length of a wrapped row key: ephemeral public key, nonce, encrypted key, tag.
pub const WRAPPED_KEY_LEN: usize = 32 + NONCE_LEN + KEY_LEN + TAG_LEN;

const WRAP_INFO: &[u8] = b"dossier row-key wrap v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("secure random source failed: {0}")]
    Rng(String),
    #[error("malformed public key")]
    MalformedPublicKey,
    #[error("malformed secret key")]
    MalformedSecretKey,
    #[error("malformed signature")]
    MalformedSignature,
    #[error("wrapped key cannot be opened with this private key")]
    WrongKey,
    #[error("corrupt blob: {0}")]
    Corrupt(&'static str),
    #[error("authentication failed: wrong key or tampered ciphertext")]
    AuthFailure,
    #[error("invalid hex character {ch:?} at offset {offset}")]
    InvalidHex { offset: usize, ch: char },
    #[error("hex text has odd length {0}")]
    OddLength(usize),
}

pub(crate) fn random_bytes<const N: usize>() -> Result<[u8; N], CryptoError> {
    let mut out = [0u8; N];
    OsRng
        .try_fill_bytes(&mut out)
        .map_err(|e| CryptoError::Rng(e.to_string()))?;
    Ok(out)
}

// ----------------------------------------------------------------------------
// Symmetric row keys
// ----------------------------------------------------------------------------

/// A 256-bit per-dossier-version row key.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// Generates a fresh row key from the OS random source.
pub fn generate_row_key() -> Result<SymmetricKey, CryptoError> {
    random_bytes::<KEY_LEN>().map(SymmetricKey)
}

// ----------------------------------------------------------------------------
// Key pairs
// ----------------------------------------------------------------------------

/// Short opaque identifier of a public key (first 8 bytes of its SHA-256).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId([u8; 8]);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex_encode(&self.0))
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey {
    verifying: VerifyingKey,
    exchange: ExchangePublic,
}

impl PublicKey {
    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        let mut out = [0u8; PUBLIC_KEY_LEN];
        out[..32].copy_from_slice(self.verifying.as_bytes());
        out[32..].copy_from_slice(self.exchange.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != PUBLIC_KEY_LEN {
            return Err(CryptoError::MalformedPublicKey);
        }
        let mut ver = [0u8; 32];
        ver.copy_from_slice(&bytes[..32]);
        let verifying =
            VerifyingKey::from_bytes(&ver).map_err(|_| CryptoError::MalformedPublicKey)?;
        let mut ex = [0u8; 32];
        ex.copy_from_slice(&bytes[32..]);
        Ok(Self { verifying, exchange: ExchangePublic::from(ex) })
    }

    pub fn key_id(&self) -> KeyId {
        let digest = Sha256::digest(self.to_bytes());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        KeyId(id)
    }

    pub fn to_hex(&self) -> String {
        hex_encode(&self.to_bytes())
    }

    pub fn from_hex(text: &str) -> Result<Self, CryptoError> {
        Self::from_bytes(&hex_decode(text)?)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.key_id())
    }
}

/// A client identity: Ed25519 signing key plus X25519 key-agreement key.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    exchange: StaticSecret,
    public: PublicKey,
}

impl KeyPair {
    fn from_parts(signing: SigningKey, exchange: StaticSecret) -> Self {
        let public = PublicKey {
            verifying: signing.verifying_key(),
            exchange: ExchangePublic::from(&exchange),
        };
        Self { signing, exchange, public }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn key_id(&self) -> KeyId {
        self.public.key_id()
    }

    /// Secret material, for the owner's local profile only.
    pub fn secret_bytes(&self) -> [u8; SECRET_KEY_LEN] {
        let mut out = [0u8; SECRET_KEY_LEN];
        out[..32].copy_from_slice(&self.signing.to_bytes());
        out[32..].copy_from_slice(&self.exchange.to_bytes());
        out
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != SECRET_KEY_LEN {
            return Err(CryptoError::MalformedSecretKey);
        }
        let mut sig = [0u8; 32];
        sig.copy_from_slice(&bytes[..32]);
        let mut ex = [0u8; 32];
        ex.copy_from_slice(&bytes[32..]);
        Ok(Self::from_parts(SigningKey::from_bytes(&sig), StaticSecret::from(ex)))
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair({})", self.key_id())
    }
}

pub fn generate_keypair() -> Result<KeyPair, CryptoError> {
    let sig = random_bytes::<32>()?;
    let ex = random_bytes::<32>()?;
    Ok(KeyPair::from_parts(SigningKey::from_bytes(&sig), StaticSecret::from(ex)))
}

// ----------------------------------------------------------------------------
// Key wrapping
// ----------------------------------------------------------------------------

fn wrap_cipher(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> Aes256Gcm {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut kek = [0u8; KEY_LEN];
    hk.expand(WRAP_INFO, &mut kek).expect("32 bytes is a valid HKDF output length");
    Aes256Gcm::new((&kek).into())
}

/// Encrypts `key` so that only the holder of `receiver`'s private key can
/// recover it. Each call uses a fresh ephemeral key, so wrapping the same key
/// twice yields different blobs.
pub fn wrap_key(key: &SymmetricKey, receiver: &PublicKey) -> Result<Vec<u8>, CryptoError> {
    let eph_secret = StaticSecret::from(random_bytes::<32>()?);
    let eph_public = ExchangePublic::from(&eph_secret);
    let shared = eph_secret.diffie_hellman(&receiver.exchange);
    if !shared.was_contributory() {
        return Err(CryptoError::MalformedPublicKey);
    }
    let cipher = wrap_cipher(shared.as_bytes(), eph_public.as_bytes(), receiver.exchange.as_bytes());
    let nonce = random_bytes::<NONCE_LEN>()?;
    let sealed = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload { msg: key.as_bytes(), aad: eph_public.as_bytes() },
        )
        .map_err(|_| CryptoError::AuthFailure)?;

    let mut blob = Vec::with_capacity(WRAPPED_KEY_LEN);
    blob.extend_from_slice(eph_public.as_bytes());
    blob.extend_from_slice(&nonce);
    blob.extend_from_slice(&sealed);
    debug_assert_eq!(blob.len(), WRAPPED_KEY_LEN);
    Ok(blob)
}

pub fn unwrap_key(blob: &[u8], keypair: &KeyPair) -> Result<SymmetricKey, CryptoError> {
    if blob.len() != WRAPPED_KEY_LEN {
        return Err(CryptoError::Corrupt("wrapped key length"));
    }
    let mut eph = [0u8; 32];
    eph.copy_from_slice(&blob[..32]);
    let eph_public = ExchangePublic::from(eph);
    let shared = keypair.exchange.diffie_hellman(&eph_public);
    if !shared.was_contributory() {
        return Err(CryptoError::Corrupt("degenerate ephemeral key"));
    }
    let recipient = keypair.public.exchange;
    let cipher = wrap_cipher(shared.as_bytes(), &eph, recipient.as_bytes());
    let nonce = &blob[32..32 + NONCE_LEN];
    let opened = cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: &blob[32 + NONCE_LEN..], aad: &eph })
        .map_err(|_| CryptoError::WrongKey)?;
    let mut key = [0u8; KEY_LEN];
    key.copy_from_slice(&opened);
    Ok(SymmetricKey(key))
}

// ----------------------------------------------------------------------------
// Signatures
// ----------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature([u8; SIGNATURE_LEN]);

impl Signature {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_LEN] {
        self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SIGNATURE_LEN] =
            bytes.try_into().map_err(|_| CryptoError::MalformedSignature)?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex_encode(&self.0[..6]))
    }
}

pub fn sign(msg: &[u8], keypair: &KeyPair) -> Signature {
    Signature(keypair.signing.sign(msg).to_bytes())
}

pub fn verify(msg: &[u8], sig: &Signature, signer: &PublicKey) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    signer.verifying.verify(msg, &sig).is_ok()
}

// ----------------------------------------------------------------------------
// Row cipher
// ----------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub nonce: [u8; NONCE_LEN],
    pub body: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl Ciphertext {
    /// `nonce || body || tag`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.body.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(CryptoError::Corrupt("ciphertext shorter than nonce and tag"));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().expect("split at NONCE_LEN"),
            body: body.to_vec(),
            tag: tag.try_into().expect("split at TAG_LEN"),
        })
    }

    pub fn to_hex(&self) -> String {
        hex_encode(&self.to_bytes())
    }

    pub fn from_hex(text: &str) -> Result<Self, CryptoError> {
        Self::from_bytes(&hex_decode(text)?)
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("nonce", &hex_encode(&self.nonce))
            .field("body_len", &self.body.len())
            .finish()
    }
}

pub fn encrypt_row(plaintext: &[u8], key: &SymmetricKey) -> Result<Ciphertext, CryptoError> {
    let cipher = Aes256Gcm::new(key.as_bytes().into());
    let nonce = random_bytes::<NONCE_LEN>()?;
    let mut sealed = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .map_err(|_| CryptoError::AuthFailure)?;
    let tag_start = sealed.len() - TAG_LEN;
    let tag: [u8; TAG_LEN] = sealed[tag_start..].try_into().expect("tag length");
    sealed.truncate(tag_start);
    Ok(Ciphertext { nonce, body: sealed, tag })
}

pub fn decrypt_row(ct: &Ciphertext, key: &SymmetricKey) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes256Gcm::new(key.as_bytes().into());
    let mut sealed = Vec::with_capacity(ct.body.len() + TAG_LEN);
    sealed.extend_from_slice(&ct.body);
    sealed.extend_from_slice(&ct.tag);
    cipher
        .decrypt(Nonce::from_slice(&ct.nonce), sealed.as_slice())
        .map_err(|_| CryptoError::AuthFailure)
}

// ----------------------------------------------------------------------------
// Hex
// ----------------------------------------------------------------------------

/// Uppercase hex, `0-9A-F`.
pub fn hex_encode(bytes: &[u8]) -> String {
    hex::encode_upper(bytes)
}

/// Strict inverse of [`hex_encode`]: lowercase digits are rejected.
pub fn hex_decode(text: &str) -> Result<Vec<u8>, CryptoError> {
    check_upper_hex(text)?;
    if text.len() % 2 != 0 {
        return Err(CryptoError::OddLength(text.len()));
    }
    hex::decode(text).map_err(|_| CryptoError::Corrupt("hex"))
}

/// Validates the alphabet only.
pub fn check_upper_hex(text: &str) -> Result<(), CryptoError> {
    match text.char_indices().find(|(_, c)| !matches!(c, '0'..='9' | 'A'..='F')) {
        Some((offset, ch)) => Err(CryptoError::InvalidHex { offset, ch }),
        None => Ok(()),
    }
}

// ----------------------------------------------------------------------------
// Passwords and serde helpers
// ----------------------------------------------------------------------------

/// PBKDF2-HMAC-SHA256 digest of a password.
pub fn password_digest(password: &str, salt: &[u8], iterations: u32) -> [u8; 32] {
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    out
}

/// Fresh random 128-bit token as hex.
pub fn random_token() -> Result<String, CryptoError> {
    Ok(hex_encode(&random_bytes::<16>()?))
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        PublicKey::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex_encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex_decode(&text).map_err(serde::de::Error::custom)?;
        Signature::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "hex_bytes")]` for byte vectors carried as uppercase hex.
pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::hex_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        super::hex_decode(&text).map_err(serde::de::Error::custom)
    }
}
