//! Load map and calling convention shared by the assembler, the patcher and the VM.
//!
//! Enclave memory, starting at [`ENCLAVE_BASE`]:
//!
//! ```text
//! CODE    at ENCLAVE_BASE
//! RODATA  at ENCLAVE_BASE + align16(code_len)
//! RWDATA  at RODATA + align16(rodata_len)
//! ...
//! frame   [stack_top - 64, stack_top)     r15 = stack_top - 64
//! ```
//!
//! Ecall frame (r15-relative): argument `i` at `4*i` for `i < 6`, locals in
//! `[24, 64)`, the SDK wrapper's guard word at `60`. The 64 bytes below r15
//! are free scratch (patches spill registers there).

/// Start of the trusted range.
pub const ENCLAVE_BASE: u32 = 0x1000_0000;
/// Start of the untrusted range.
pub const UNTRUSTED_BASE: u32 = 0x0000_0000;

pub const FRAME_SIZE: u32 = 64;
pub const MAX_ARGS: usize = 6;
pub const LOCALS_OFFSET: u32 = (MAX_ARGS as u32) * 4;
pub const SDK_GUARD_OFFSET: u32 = 60;

/// Frame pointer register, preserved across an ecall body.
pub const FRAME_REG: u8 = 15;
/// Registers reserved for SDK stubs.
pub const SDK_SCRATCH_A: u8 = 13;
pub const SDK_SCRATCH_B: u8 = 14;
/// Ecall index on entry.
pub const INDEX_REG: u8 = 0;
/// First argument register; arguments occupy r1..r6.
pub const FIRST_ARG_REG: u8 = 1;

pub const SECTION_ALIGN: u32 = 16;

pub fn align_up(value: u32, align: u32) -> u32 {
    value.div_ceil(align) * align
}

/// Absolute addresses of the three loaded sections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionMap {
    pub code: u32,
    pub rodata: u32,
    pub rwdata: u32,
    /// First byte past RWDATA.
    pub end: u32,
}

impl SectionMap {
    pub fn new(code_len: u32, rodata_len: u32, rwdata_len: u32) -> Self {
        let code = ENCLAVE_BASE;
        let rodata = code + align_up(code_len, SECTION_ALIGN);
        let rwdata = rodata + align_up(rodata_len, SECTION_ALIGN);
        SectionMap {
            code,
            rodata,
            rwdata,
            end: rwdata + rwdata_len,
        }
    }
}
