//! Local attestation: a platform-held secret MACs reports so that only the
//! named attester, on the same platform, can check them.

use hmac::{Hmac, Mac};
use sha2::Sha256;

use super::bundle::LoadedEnclave;
use super::material::MeasurementHash;

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttestationReport {
    pub target_measurement: MeasurementHash,
    pub attester_measurement: MeasurementHash,
    pub auxiliary: [u8; 16],
    pub mac: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AttestError {
    #[error("platform secret not initialized")]
    Uninitialized,
}

/// A simulated machine. The secret is written once and never exposed.
#[derive(Clone, Default)]
pub struct Platform {
    secret: Option<[u8; 32]>,
}

impl core::fmt::Debug for Platform {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Platform")
            .field("initialized", &self.secret.is_some())
            .finish()
    }
}

impl Platform {
    pub fn uninitialized() -> Self {
        Platform { secret: None }
    }

    pub fn with_secret(secret: [u8; 32]) -> Self {
        Platform { secret: Some(secret) }
    }

    pub fn is_initialized(&self) -> bool {
        self.secret.is_some()
    }

    /// The report key is the platform secret followed by the attester's measurement.
    fn mac_for(
        &self,
        target: &MeasurementHash,
        attester: &MeasurementHash,
        auxiliary: &[u8; 16],
    ) -> Result<HmacSha256, AttestError> {
        let secret = self.secret.ok_or(AttestError::Uninitialized)?;
        let mut key = [0u8; 64];
        key[..32].copy_from_slice(&secret);
        key[32..].copy_from_slice(attester.as_bytes());
        let mut mac = HmacSha256::new_from_slice(&key).expect("HMAC takes any key length");
        mac.update(target.as_bytes());
        mac.update(attester.as_bytes());
        mac.update(auxiliary);
        Ok(mac)
    }

    /// Produces a report binding `target` for the attester named by `attester`.
    pub fn report(
        &self,
        target: MeasurementHash,
        attester: MeasurementHash,
        auxiliary: [u8; 16],
    ) -> Result<AttestationReport, AttestError> {
        let mac = self.mac_for(&target, &attester, &auxiliary)?.finalize().into_bytes();
        Ok(AttestationReport {
            target_measurement: target,
            attester_measurement: attester,
            auxiliary,
            mac: mac.into(),
        })
    }

    /// Run by the attester: true iff the report was produced on this platform
    /// for `my_measurement`.
    pub fn check_report(&self, report: &AttestationReport, my_measurement: &MeasurementHash) -> bool {
        let Ok(mac) = self.mac_for(&report.target_measurement, my_measurement, &report.auxiliary) else {
            return false;
        };
        report.attester_measurement == *my_measurement && mac.verify_slice(&report.mac).is_ok()
    }
}

/// Report for a loaded enclave, addressed to `attester_measurement`.
pub fn attest_local(
    platform: &Platform,
    target: &LoadedEnclave,
    attester_measurement: MeasurementHash,
    auxiliary: [u8; 16],
) -> Result<AttestationReport, AttestError> {
    platform.report(target.measurement, attester_measurement, auxiliary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mac_binds_platform_and_attester() {
        let p = Platform::with_secret([7; 32]);
        let other = Platform::with_secret([8; 32]);
        let target = MeasurementHash([1; 32]);
        let me = MeasurementHash([2; 32]);
        let r = p.report(target, me, [0; 16]).unwrap();
        assert!(p.check_report(&r, &me));
        assert!(!p.check_report(&r, &MeasurementHash([3; 32])));
        assert!(!other.check_report(&r, &me));
        let mut forged = r;
        forged.target_measurement = MeasurementHash([9; 32]);
        assert!(!p.check_report(&forged, &me));
    }

    #[test]
    fn uninitialized_platform_cannot_report() {
        let p = Platform::uninitialized();
        assert_eq!(
            p.report(MeasurementHash::default(), MeasurementHash::default(), [0; 16]),
            Err(AttestError::Uninitialized)
        );
    }
}
