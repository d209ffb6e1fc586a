use alloc::vec::Vec;

use super::keys::{sign_material, EnclaveSignature, KeyError, PublicKey, SigningKey};
use super::material::{generate_signing_material, MeasurementHash, SigningMaterial, VendorMetadata};
use crate::format::{EnclaveImage, FormatError};

/// Image bytes with their material and signature appended. Nothing ties the
/// three together until [`verify_and_load`] checks them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedEnclave {
    pub image_bytes: Vec<u8>,
    pub material: SigningMaterial,
    pub signature: EnclaveSignature,
}

/// Second half of the two-step flow. Deliberately performs no consistency check.
pub fn append_signature(image_bytes: Vec<u8>, material: SigningMaterial, signature: EnclaveSignature) -> SignedEnclave {
    SignedEnclave {
        image_bytes,
        material,
        signature,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SignError {
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Material generation, signing and appending in one call.
pub fn sign_single_step(
    image: &EnclaveImage,
    metadata: VendorMetadata,
    key: &SigningKey,
) -> Result<SignedEnclave, SignError> {
    let material = generate_signing_material(image, metadata)?;
    let signature = sign_material(&material, key)?;
    Ok(append_signature(image.serialize()?, material, signature))
}

/// Single-step signing of raw serialized bytes, as a signer tool sees its input file.
pub fn sign_bytes_single_step(
    image_bytes: Vec<u8>,
    metadata: VendorMetadata,
    key: &SigningKey,
) -> Result<SignedEnclave, KeyError> {
    let material = super::material::material_for_bytes(&image_bytes, metadata);
    let signature = sign_material(&material, key)?;
    Ok(append_signature(image_bytes, material, signature))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoadError {
    #[error("measurement mismatch: material says {expected}, image hashes to {actual}")]
    MeasurementMismatch {
        expected: MeasurementHash,
        actual: MeasurementHash,
    },
    #[error("signature does not verify over the signing material")]
    BadSignature,
    #[error("image bytes do not parse: {0}")]
    MalformedImage(FormatError),
}

/// An enclave accepted at load time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedEnclave {
    pub image: EnclaveImage,
    pub measurement: MeasurementHash,
    pub signer: PublicKey,
}

/// Recomputes the measurement over the shipped bytes and checks the signature.
pub fn verify_and_load(bundle: &SignedEnclave) -> Result<LoadedEnclave, LoadError> {
    let actual = MeasurementHash::of_bytes(&bundle.image_bytes);
    if actual != bundle.material.measurement {
        return Err(LoadError::MeasurementMismatch {
            expected: bundle.material.measurement,
            actual,
        });
    }
    if !bundle.signature.verifies(&bundle.material) {
        return Err(LoadError::BadSignature);
    }
    let image = EnclaveImage::parse(&bundle.image_bytes).map_err(LoadError::MalformedImage)?;
    Ok(LoadedEnclave {
        image,
        measurement: actual,
        signer: bundle.signature.public_key,
    })
}
