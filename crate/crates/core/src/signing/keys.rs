use alloc::vec::Vec;

use rsa::pkcs1::DecodeRsaPrivateKey;
use rsa::traits::PublicKeyParts;
use rsa::{BigUint, Pkcs1v15Sign, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest, Sha256};

use super::material::{SigningMaterial, MATERIAL_LEN};

pub const MODULUS_BITS: usize = 3072;
pub const SIGNATURE_LEN: usize = MODULUS_BITS / 8;
pub const PUBLIC_EXPONENT: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("key is not RSA-{MODULUS_BITS} with public exponent {PUBLIC_EXPONENT}")]
    WrongParameters,
    #[error("key encoding rejected")]
    Encoding,
    #[error("RSA operation failed")]
    Rsa,
}

/// RSA-3072 private key with exponent 3.
#[derive(Clone)]
pub struct SigningKey(RsaPrivateKey);

impl core::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "SigningKey({:?})", self.public().fingerprint())
    }
}

impl SigningKey {
    pub fn new(key: RsaPrivateKey) -> Result<Self, KeyError> {
        if key.n().bits() != MODULUS_BITS || *key.e() != BigUint::from(PUBLIC_EXPONENT) {
            return Err(KeyError::WrongParameters);
        }
        Ok(SigningKey(key))
    }

    pub fn from_pkcs1_der(der: &[u8]) -> Result<Self, KeyError> {
        let key = RsaPrivateKey::from_pkcs1_der(der).map_err(|_| KeyError::Encoding)?;
        Self::new(key)
    }

    pub fn rsa(&self) -> &RsaPrivateKey {
        &self.0
    }

    pub fn public(&self) -> PublicKey {
        PublicKey::from_rsa(&self.0.to_public_key())
    }

    /// PKCS#1 v1.5 over SHA-256; deterministic for a given key and message.
    pub fn sign_digest(&self, digest: &[u8; 32]) -> Result<[u8; SIGNATURE_LEN], KeyError> {
        let sig = self
            .0
            .sign(Pkcs1v15Sign::new::<Sha256>(), digest)
            .map_err(|_| KeyError::Rsa)?;
        sig.as_slice().try_into().map_err(|_| KeyError::Rsa)
    }
}

/// Big-endian modulus of an exponent-3 RSA-3072 public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey {
    pub modulus: [u8; SIGNATURE_LEN],
}

impl core::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "PublicKey({:02x?})", &self.fingerprint()[..8])
    }
}

impl PublicKey {
    fn from_rsa(key: &RsaPublicKey) -> Self {
        let be = key.n().to_bytes_be();
        let mut modulus = [0u8; SIGNATURE_LEN];
        modulus[SIGNATURE_LEN - be.len()..].copy_from_slice(&be);
        PublicKey { modulus }
    }

    /// SHA-256 of the modulus (the signer identity).
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.modulus).into()
    }

    pub fn verify_digest(&self, digest: &[u8; 32], signature: &[u8; SIGNATURE_LEN]) -> bool {
        let Ok(key) = RsaPublicKey::new(BigUint::from_bytes_be(&self.modulus), BigUint::from(PUBLIC_EXPONENT)) else {
            return false;
        };
        key.verify(Pkcs1v15Sign::new::<Sha256>(), digest, signature).is_ok()
    }
}

/// Signature over a material plus the public key it verifies under.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnclaveSignature {
    pub rsa_signature: [u8; SIGNATURE_LEN],
    pub public_key: PublicKey,
}

impl core::fmt::Debug for EnclaveSignature {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("EnclaveSignature")
            .field("rsa_signature", &&self.rsa_signature[..8])
            .field("public_key", &self.public_key)
            .finish()
    }
}

impl EnclaveSignature {
    pub fn verifies(&self, material: &SigningMaterial) -> bool {
        self.public_key
            .verify_digest(&material_digest(material), &self.rsa_signature)
    }
}

fn material_digest(material: &SigningMaterial) -> [u8; 32] {
    let bytes: [u8; MATERIAL_LEN] = material.to_bytes();
    Sha256::digest(bytes).into()
}

/// Signs the canonical 64-byte material. The signer does not inspect the
/// material beyond its format.
pub fn sign_material(material: &SigningMaterial, key: &SigningKey) -> Result<EnclaveSignature, KeyError> {
    Ok(EnclaveSignature {
        rsa_signature: key.sign_digest(&material_digest(material))?,
        public_key: key.public(),
    })
}

const BUNDLED_KEYS: [&[u8]; 3] = [
    include_bytes!("../../keys/isv-alpha.der"),
    include_bytes!("../../keys/isv-beta.der"),
    include_bytes!("../../keys/facility.der"),
];

pub const BUNDLED_KEY_NAMES: [&str; 3] = ["isv-alpha", "isv-beta", "facility"];

/// Fixed RSA-3072/e=3 keys shipped with the crate for reproducible runs.
pub fn bundled_key(index: usize) -> SigningKey {
    SigningKey::from_pkcs1_der(BUNDLED_KEYS[index % BUNDLED_KEYS.len()]).expect("bundled keys are valid")
}

pub fn bundled_key_count() -> usize {
    BUNDLED_KEYS.len()
}

/// Exposes the raw DER so file tooling can write bundled keys out.
pub fn bundled_key_der(index: usize) -> Vec<u8> {
    BUNDLED_KEYS[index % BUNDLED_KEYS.len()].to_vec()
}
