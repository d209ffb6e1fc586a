//! The `SET1` enclave container.
//!
//! Layout (all integers little-endian, no padding):
//!
//! ```text
//! magic "SET1" (4) | format_version u16 | sdk_version u16 | entry_offset u32 | section_count u8
//! 4 x ( kind u8 | declared_length u32 | payload )      kinds in order CODE=1 RODATA=2 RWDATA=3 META=4
//! ```
//!
//! The serialized byte string is exactly what the measurement hashes.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use super::isa::INSN_LEN;

pub const MAGIC: [u8; 4] = *b"SET1";
pub const FORMAT_VERSION: u16 = 1;
pub const SECTION_COUNT: u8 = 4;
pub const HEADER_LEN: usize = 13;
pub const SECTION_PREFIX_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum SectionKind {
    Code = 1,
    Rodata = 2,
    Rwdata = 3,
    Meta = 4,
}

impl SectionKind {
    pub const ORDER: [SectionKind; 4] = [
        SectionKind::Code,
        SectionKind::Rodata,
        SectionKind::Rwdata,
        SectionKind::Meta,
    ];

    pub fn from_byte(b: u8) -> Option<SectionKind> {
        Self::ORDER.iter().copied().find(|k| *k as u8 == b)
    }

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Code => "CODE",
            SectionKind::Rodata => "RODATA",
            SectionKind::Rwdata => "RWDATA",
            SectionKind::Meta => "META",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub format_version: u16,
    pub sdk_version: u16,
    pub entry_offset: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub kind: SectionKind,
    pub payload: Vec<u8>,
}

impl Section {
    pub fn new(kind: SectionKind, payload: Vec<u8>) -> Self {
        Section { kind, payload }
    }

    pub fn declared_length(&self) -> u32 {
        self.payload.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:02x?}, expected \"SET1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("section count is {0}, expected 4")]
    BadSectionCount(u8),
    #[error("input truncated inside the header")]
    TruncatedHeader,
    #[error("input truncated inside the {0} section")]
    TruncatedSection(SectionKind),
    #[error("section {index} has kind byte {found:#04x}, expected {expected}")]
    SectionOrder {
        index: usize,
        expected: SectionKind,
        found: u8,
    },
    #[error("{0} trailing bytes after the META section (declared lengths do not cover the input)")]
    TrailingBytes(usize),
    #[error("CODE length {0} is not a multiple of 8")]
    CodeMisaligned(usize),
    #[error("CODE section is empty")]
    EmptyCode,
    #[error("entry offset {0:#x} is outside CODE or not instruction aligned")]
    BadEntry(u32),
    #[error("section {0} exceeds the 32-bit length field")]
    SectionTooLarge(SectionKind),
}

/// A parsed enclave image. `source_name` is a display label only: it is not
/// serialized, not measured and ignored by equality.
#[derive(Clone, Debug)]
pub struct EnclaveImage {
    pub header: Header,
    sections: [Section; 4],
    pub source_name: String,
}

impl PartialEq for EnclaveImage {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header && self.sections == other.sections
    }
}

impl Eq for EnclaveImage {}

impl EnclaveImage {
    /// Builds an image from section payloads, checking every invariant.
    pub fn new(
        sdk_version: u16,
        entry_offset: u32,
        code: Vec<u8>,
        rodata: Vec<u8>,
        rwdata: Vec<u8>,
        meta: Vec<u8>,
    ) -> Result<Self, FormatError> {
        let img = EnclaveImage {
            header: Header {
                format_version: FORMAT_VERSION,
                sdk_version,
                entry_offset,
            },
            sections: [
                Section::new(SectionKind::Code, code),
                Section::new(SectionKind::Rodata, rodata),
                Section::new(SectionKind::Rwdata, rwdata),
                Section::new(SectionKind::Meta, meta),
            ],
            source_name: String::new(),
        };
        img.validate()?;
        Ok(img)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.source_name = name.into();
        self
    }

    pub fn sections(&self) -> &[Section; 4] {
        &self.sections
    }

    pub fn section(&self, kind: SectionKind) -> &Section {
        &self.sections[kind as usize - 1]
    }

    pub fn code(&self) -> &[u8] {
        &self.section(SectionKind::Code).payload
    }

    pub fn rodata(&self) -> &[u8] {
        &self.section(SectionKind::Rodata).payload
    }

    pub fn rwdata(&self) -> &[u8] {
        &self.section(SectionKind::Rwdata).payload
    }

    pub fn meta(&self) -> &[u8] {
        &self.section(SectionKind::Meta).payload
    }

    /// Mutable access to a section payload. Callers must keep the length
    /// invariants (checked again by `serialize`).
    pub fn payload_mut(&mut self, kind: SectionKind) -> &mut Vec<u8> {
        &mut self.sections[kind as usize - 1].payload
    }

    pub fn entry_offset(&self) -> u32 {
        self.header.entry_offset
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.header.format_version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(self.header.format_version));
        }
        for s in &self.sections {
            if u32::try_from(s.payload.len()).is_err() {
                return Err(FormatError::SectionTooLarge(s.kind));
            }
        }
        let code = self.code();
        if code.is_empty() {
            return Err(FormatError::EmptyCode);
        }
        if !code.len().is_multiple_of(INSN_LEN) {
            return Err(FormatError::CodeMisaligned(code.len()));
        }
        let entry = self.header.entry_offset;
        if entry as usize >= code.len() || !(entry as usize).is_multiple_of(INSN_LEN) {
            return Err(FormatError::BadEntry(entry));
        }
        Ok(())
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN
            + self
                .sections
                .iter()
                .map(|s| SECTION_PREFIX_LEN + s.payload.len())
                .sum::<usize>()
    }

    /// Canonical byte encoding. Fails only if an invariant was broken through
    /// `payload_mut`.
    pub fn serialize(&self) -> Result<Vec<u8>, FormatError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&self.header.sdk_version.to_le_bytes());
        out.extend_from_slice(&self.header.entry_offset.to_le_bytes());
        out.push(SECTION_COUNT);
        for s in &self.sections {
            out.push(s.kind as u8);
            out.extend_from_slice(&s.declared_length().to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            // A short input with the wrong magic is still reported as bad magic.
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(FormatError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(FormatError::TruncatedHeader);
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let format_version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if format_version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(format_version));
        }
        let sdk_version = u16::from_le_bytes([bytes[6], bytes[7]]);
        let entry_offset = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if bytes[12] != SECTION_COUNT {
            return Err(FormatError::BadSectionCount(bytes[12]));
        }

        let mut pos = HEADER_LEN;
        let mut payloads: [Vec<u8>; 4] = Default::default();
        for (index, expected) in SectionKind::ORDER.iter().copied().enumerate() {
            let prefix = bytes
                .get(pos..pos + SECTION_PREFIX_LEN)
                .ok_or(FormatError::TruncatedSection(expected))?;
            if prefix[0] != expected as u8 {
                return Err(FormatError::SectionOrder {
                    index,
                    expected,
                    found: prefix[0],
                });
            }
            let len = u32::from_le_bytes(prefix[1..5].try_into().unwrap()) as usize;
            pos += SECTION_PREFIX_LEN;
            let payload = pos
                .checked_add(len)
                .and_then(|end| bytes.get(pos..end))
                .ok_or(FormatError::TruncatedSection(expected))?;
            payloads[index] = payload.to_vec();
            pos += len;
        }
        if pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - pos));
        }
        let [code, rodata, rwdata, meta] = payloads;
        let img = EnclaveImage {
            header: Header {
                format_version,
                sdk_version,
                entry_offset,
            },
            sections: [
                Section::new(SectionKind::Code, code),
                Section::new(SectionKind::Rodata, rodata),
                Section::new(SectionKind::Rwdata, rwdata),
                Section::new(SectionKind::Meta, meta),
            ],
            source_name: String::new(),
        };
        img.validate()?;
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn small() -> EnclaveImage {
        let code = [0x12u8, 0, 0, 0, 0, 0, 0, 0].repeat(3);
        EnclaveImage::new(1, 8, code, vec![1, 2, 3], vec![0; 4], vec![9]).unwrap()
    }

    #[test]
    fn empty_aux_sections_length_is_fixed_arithmetic() {
        let img = EnclaveImage::new(1, 0, vec![0x12; 16], vec![], vec![], vec![]).unwrap();
        let bytes = img.serialize().unwrap();
        assert_eq!(bytes.len(), 13 + 4 * 5 + 16);
    }

    #[test]
    fn round_trip() {
        let img = small();
        let bytes = img.serialize().unwrap();
        assert_eq!(EnclaveImage::parse(&bytes).unwrap(), img);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = small().serialize().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(EnclaveImage::parse(&bytes), Err(FormatError::BadMagic(*b"XXXX")));
    }

    #[test]
    fn every_strict_prefix_is_rejected() {
        let bytes = small().serialize().unwrap();
        for cut in 0..bytes.len() {
            assert!(EnclaveImage::parse(&bytes[..cut]).is_err(), "prefix {cut}");
        }
    }

    #[test]
    fn truncation_names_the_section() {
        let img = small();
        let bytes = img.serialize().unwrap();
        // Cut one byte into the RODATA payload.
        let rodata_payload_start = HEADER_LEN + SECTION_PREFIX_LEN + img.code().len() + SECTION_PREFIX_LEN;
        assert_eq!(
            EnclaveImage::parse(&bytes[..rodata_payload_start + 1]),
            Err(FormatError::TruncatedSection(SectionKind::Rodata))
        );
    }

    #[test]
    fn wrong_section_count_and_trailing_bytes() {
        let mut bytes = small().serialize().unwrap();
        bytes[12] = 3;
        assert_eq!(EnclaveImage::parse(&bytes), Err(FormatError::BadSectionCount(3)));
        let mut bytes = small().serialize().unwrap();
        bytes.push(0);
        assert_eq!(EnclaveImage::parse(&bytes), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn entry_must_be_aligned_and_inside_code() {
        assert_eq!(
            EnclaveImage::new(1, 4, vec![0x12; 16], vec![], vec![], vec![]),
            Err(FormatError::BadEntry(4))
        );
        assert_eq!(
            EnclaveImage::new(1, 16, vec![0x12; 16], vec![], vec![], vec![]),
            Err(FormatError::BadEntry(16))
        );
    }

    #[test]
    fn source_name_is_not_part_of_identity() {
        assert_eq!(small().with_name("a"), small().with_name("b"));
    }
}
