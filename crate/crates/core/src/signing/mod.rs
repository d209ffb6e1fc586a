//! Enclave measurement, signing material, RSA-3072 signatures, load-time
//! verification and simulated local attestation.

pub mod attest;
pub mod bundle;
pub mod keys;
pub mod material;

pub use attest::{attest_local, AttestError, AttestationReport, Platform};
pub use bundle::{
    append_signature, sign_bytes_single_step, sign_single_step, verify_and_load, LoadError, LoadedEnclave, SignError,
    SignedEnclave,
};
pub use keys::{
    bundled_key, bundled_key_count, bundled_key_der, sign_material, EnclaveSignature, KeyError, PublicKey, SigningKey,
    BUNDLED_KEY_NAMES, SIGNATURE_LEN,
};
pub use material::{
    generate_signing_material, material_for_bytes, measure, MeasurementHash, SigningMaterial, VendorMetadata,
    MATERIAL_LEN,
};
