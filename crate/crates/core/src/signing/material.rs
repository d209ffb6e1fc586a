use core::fmt;

use sha2::{Digest, Sha256};

use crate::format::{EnclaveImage, FormatError};

/// SHA-256 over an image's canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MeasurementHash(pub [u8; 32]);

impl MeasurementHash {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        MeasurementHash(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for MeasurementHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for MeasurementHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MeasurementHash({self})")
    }
}

/// Measures a valid image.
pub fn measure(image: &EnclaveImage) -> Result<MeasurementHash, FormatError> {
    Ok(MeasurementHash::of_bytes(&image.serialize()?))
}

/// Vendor-supplied fields of the signing material.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct VendorMetadata {
    pub vendor_id: [u8; 16],
    /// `YYYYMMDD` as a decimal number.
    pub date: u32,
    pub attributes: u64,
    pub version: u32,
}

impl VendorMetadata {
    /// Vendor id from a label, truncated or zero-padded to 16 bytes.
    pub fn vendor_from_label(label: &str) -> [u8; 16] {
        let mut id = [0u8; 16];
        let n = label.len().min(16);
        id[..n].copy_from_slice(&label.as_bytes()[..n]);
        id
    }
}

pub const MATERIAL_LEN: usize = 64;

/// The exact payload the enclave signature covers.
///
/// Encoding: `vendor_id (16) | date u32 | attributes u64 | version u32 | measurement (32)`,
/// little-endian, 64 bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SigningMaterial {
    pub metadata: VendorMetadata,
    pub measurement: MeasurementHash,
}

impl SigningMaterial {
    pub fn to_bytes(&self) -> [u8; MATERIAL_LEN] {
        let m = &self.metadata;
        let mut out = [0u8; MATERIAL_LEN];
        out[0..16].copy_from_slice(&m.vendor_id);
        out[16..20].copy_from_slice(&m.date.to_le_bytes());
        out[20..28].copy_from_slice(&m.attributes.to_le_bytes());
        out[28..32].copy_from_slice(&m.version.to_le_bytes());
        out[32..64].copy_from_slice(&self.measurement.0);
        out
    }

    pub fn from_bytes(bytes: &[u8; MATERIAL_LEN]) -> Self {
        SigningMaterial {
            metadata: VendorMetadata {
                vendor_id: bytes[0..16].try_into().unwrap(),
                date: u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
                attributes: u64::from_le_bytes(bytes[20..28].try_into().unwrap()),
                version: u32::from_le_bytes(bytes[28..32].try_into().unwrap()),
            },
            measurement: MeasurementHash(bytes[32..64].try_into().unwrap()),
        }
    }
}

pub fn generate_signing_material(
    image: &EnclaveImage,
    metadata: VendorMetadata,
) -> Result<SigningMaterial, FormatError> {
    Ok(SigningMaterial {
        metadata,
        measurement: measure(image)?,
    })
}

/// Material over raw serialized bytes, the way a signer tool hashes whatever
/// file it is handed.
pub fn material_for_bytes(image_bytes: &[u8], metadata: VendorMetadata) -> SigningMaterial {
    SigningMaterial {
        metadata,
        measurement: MeasurementHash::of_bytes(image_bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn material_layout_is_64_bytes_in_field_order() {
        let m = SigningMaterial {
            metadata: VendorMetadata {
                vendor_id: [0xAA; 16],
                date: 20200815,
                attributes: 0x0102_0304_0506_0708,
                version: 7,
            },
            measurement: MeasurementHash([0x55; 32]),
        };
        let b = m.to_bytes();
        assert_eq!(b.len(), 64);
        assert_eq!(&b[16..20], &20200815u32.to_le_bytes());
        assert_eq!(b[20], 0x08);
        assert_eq!(b[28], 7);
        assert_eq!(SigningMaterial::from_bytes(&b), m);
    }
}
