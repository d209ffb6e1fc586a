//! On-disk formats: serialized images (`.set1`), signed bundles (`.sgxs1`),
//! raw material and signature files, and key loading.

use std::fs;
use std::path::Path;

use enclave_supply_core::format::{EnclaveImage, FormatError};
use enclave_supply_core::signing::{
    bundled_key_der, EnclaveSignature, KeyError, PublicKey, SignedEnclave, SigningKey, SigningMaterial,
    BUNDLED_KEY_NAMES, MATERIAL_LEN, SIGNATURE_LEN,
};

pub const BUNDLE_MAGIC: [u8; 4] = *b"SGB1";
const BUNDLE_HEADER_LEN: usize = 8;
const SIG_FILE_LEN: usize = 2 * SIGNATURE_LEN;

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bundle does not start with \"SGB1\"")]
    BadBundleMagic,
    #[error("bundle is {got} bytes, header says {expected}")]
    BundleLength { expected: usize, got: usize },
    #[error("material file must be exactly {MATERIAL_LEN} bytes, got {0}")]
    MaterialLength(usize),
    #[error("signature file must be exactly {SIG_FILE_LEN} bytes, got {0}")]
    SignatureLength(usize),
    #[error("image: {0}")]
    Format(#[from] FormatError),
    #[error("key: {0}")]
    Key(#[from] KeyError),
    #[error("unknown bundled key {0:?} (have {names})", names = BUNDLED_KEY_NAMES.join(", "))]
    UnknownBundledKey(String),
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<u8>, FileError> {
    let path = path.as_ref();
    fs::read(path).map_err(|source| FileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|source| FileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String, FileError> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<EnclaveImage, FileError> {
    Ok(EnclaveImage::parse(&read(path)?)?)
}

/// `"SGB1" | image_len u32 LE | image | material (64) | signature (384) | modulus (384)`
pub fn encode_bundle(bundle: &SignedEnclave) -> Vec<u8> {
    let mut out = Vec::with_capacity(BUNDLE_HEADER_LEN + bundle.image_bytes.len() + MATERIAL_LEN + SIG_FILE_LEN);
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&(bundle.image_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bundle.image_bytes);
    out.extend_from_slice(&bundle.material.to_bytes());
    out.extend_from_slice(&encode_signature(&bundle.signature));
    out
}

pub fn decode_bundle(bytes: &[u8]) -> Result<SignedEnclave, FileError> {
    if bytes.len() < BUNDLE_HEADER_LEN || bytes[..4] != BUNDLE_MAGIC {
        return Err(FileError::BadBundleMagic);
    }
    let image_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = BUNDLE_HEADER_LEN + image_len + MATERIAL_LEN + SIG_FILE_LEN;
    if bytes.len() != expected {
        return Err(FileError::BundleLength {
            expected,
            got: bytes.len(),
        });
    }
    let (image, rest) = bytes[BUNDLE_HEADER_LEN..].split_at(image_len);
    let (material, sig) = rest.split_at(MATERIAL_LEN);
    Ok(SignedEnclave {
        image_bytes: image.to_vec(),
        material: decode_material(material)?,
        signature: decode_signature(sig)?,
    })
}

pub fn decode_material(bytes: &[u8]) -> Result<SigningMaterial, FileError> {
    let arr: &[u8; MATERIAL_LEN] = bytes.try_into().map_err(|_| FileError::MaterialLength(bytes.len()))?;
    Ok(SigningMaterial::from_bytes(arr))
}

/// Signature file: `signature (384) | modulus (384)`.
pub fn encode_signature(sig: &EnclaveSignature) -> Vec<u8> {
    let mut out = sig.rsa_signature.to_vec();
    out.extend_from_slice(&sig.public_key.modulus);
    out
}

pub fn decode_signature(bytes: &[u8]) -> Result<EnclaveSignature, FileError> {
    if bytes.len() != SIG_FILE_LEN {
        return Err(FileError::SignatureLength(bytes.len()));
    }
    Ok(EnclaveSignature {
        rsa_signature: bytes[..SIGNATURE_LEN].try_into().unwrap(),
        public_key: PublicKey {
            modulus: bytes[SIGNATURE_LEN..].try_into().unwrap(),
        },
    })
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<SignedEnclave, FileError> {
    decode_bundle(&read(path)?)
}

/// `bundled:<name>` picks a shipped key; anything else is a PKCS#1 DER file.
pub fn load_key(spec: &str) -> Result<SigningKey, FileError> {
    Ok(SigningKey::from_pkcs1_der(&key_der(spec)?)?)
}

pub fn key_der(spec: &str) -> Result<Vec<u8>, FileError> {
    match spec.strip_prefix("bundled:") {
        Some(name) => BUNDLED_KEY_NAMES
            .iter()
            .position(|n| *n == name)
            .map(bundled_key_der)
            .ok_or_else(|| FileError::UnknownBundledKey(name.into())),
        None => read(spec),
    }
}
