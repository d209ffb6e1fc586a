//! Ecall table layout, SDK wrapper stubs, ecall signatures, and the table
//! discovery walk an attacker performs on a compiled image.

use alloc::vec::Vec;

use super::abi::{FRAME_REG, MAX_ARGS, SDK_GUARD_OFFSET, SDK_SCRATCH_A, SDK_SCRATCH_B};
use super::image::EnclaveImage;
use super::isa::{Instruction, Opcode, INSN_LEN};

/// Precedes the ecall count in RODATA.
pub const TABLE_SENTINEL: [u8; 4] = *b"ECTB";
/// Sentinel (4) + count (2) sit immediately before the entries.
pub const TABLE_PREFIX_LEN: u32 = 6;
/// Three instructions inserted by the SDK in front of every ecall body.
pub const WRAPPER_LEN: u32 = 3 * INSN_LEN as u32;
/// Guard against cyclic dispatcher chains.
pub const MAX_WALK_STEPS: usize = 64;

/// The SDK stub preceding ecall `index`: records the ordinal in the frame's
/// guard slot.
pub fn wrapper(index: u16) -> [Instruction; 3] {
    [
        Instruction::loadi(SDK_SCRATCH_B, index as u32),
        Instruction::addi(SDK_SCRATCH_A, FRAME_REG, 0),
        Instruction::store(SDK_SCRATCH_B, SDK_SCRATCH_A, SDK_GUARD_OFFSET),
    ]
}

fn is_wrapper(code: &[u8], offset: u32) -> bool {
    let fetch = |i: u32| Instruction::fetch(code, offset + i * INSN_LEN as u32);
    match (fetch(0), fetch(1), fetch(2)) {
        (Some(a), Some(b), Some(c)) => {
            a.op() == Some(Opcode::Loadi)
                && a.a == SDK_SCRATCH_B
                && b == Instruction::addi(SDK_SCRATCH_A, FRAME_REG, 0)
                && c == Instruction::store(SDK_SCRATCH_B, SDK_SCRATCH_A, SDK_GUARD_OFFSET)
        }
        _ => false,
    }
}

/// Encodes the ecall table block (sentinel, count, entries) as laid out in RODATA.
pub fn encode_table(entries: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(TABLE_PREFIX_LEN as usize + 4 * entries.len());
    out.extend_from_slice(&TABLE_SENTINEL);
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EcallTable {
    /// RODATA offset of the first entry.
    pub rodata_offset: u32,
    pub entries: Vec<u32>,
    pub count: u16,
}

/// Result of the discovery walk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EcallDiscovery {
    pub table: EcallTable,
    /// Developer-function offset behind each table entry (wrapper skipped).
    pub functions: Vec<u32>,
    /// CODE offsets visited from the entry point up to the indirect call.
    pub walk: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiscoveryError {
    #[error("no discovery heuristics for SDK version {0}")]
    UnsupportedSdkVersion(u16),
    #[error("dispatcher walk exceeded {MAX_WALK_STEPS} steps")]
    WalkLimit,
    #[error("dispatcher chain ended at {0:#x} without an indirect call")]
    NoCallInd(u32),
    #[error("no ecall table sentinel at RODATA offset {0:#x}")]
    SentinelMismatch(u32),
    #[error("ecall table at RODATA offset {0:#x} runs past the section")]
    TableOutOfBounds(u32),
    #[error("code offset {0:#x} is outside CODE or misaligned")]
    OutOfCode(u32),
    #[error("entry {0:#x} does not start with the SDK wrapper")]
    WrapperNotRecognized(u32),
}

type Heuristic = fn(&EnclaveImage) -> Result<EcallDiscovery, DiscoveryError>;

/// Heuristic sets keyed by the SDK version recorded in the header. Other SDK
/// releases lay their dispatchers out differently and are not covered.
const HEURISTICS: &[(u16, Heuristic)] = &[(1, locate_sdk_v1)];

/// Finds the ecall table by walking from the entry point through the
/// dispatcher call chain, then resolves every entry past its SDK wrapper.
pub fn locate_ecall_table(image: &EnclaveImage) -> Result<EcallDiscovery, DiscoveryError> {
    let sdk = image.header.sdk_version;
    let (_, heuristic) = HEURISTICS
        .iter()
        .find(|(v, _)| *v == sdk)
        .ok_or(DiscoveryError::UnsupportedSdkVersion(sdk))?;
    heuristic(image)
}

fn code_slot_ok(code: &[u8], offset: u32) -> bool {
    (offset as usize).is_multiple_of(INSN_LEN) && (offset as usize) + INSN_LEN <= code.len()
}

fn locate_sdk_v1(image: &EnclaveImage) -> Result<EcallDiscovery, DiscoveryError> {
    let code = image.code();
    let rodata = image.rodata();

    // (1) exported entry, (2-4) follow the call chain until RODATA is indexed.
    let mut pc = image.entry_offset();
    let mut walk = Vec::new();
    let table_offset = loop {
        if walk.len() >= MAX_WALK_STEPS {
            return Err(DiscoveryError::WalkLimit);
        }
        if !code_slot_ok(code, pc) {
            return Err(DiscoveryError::OutOfCode(pc));
        }
        walk.push(pc);
        let insn = Instruction::fetch(code, pc).expect("checked slot");
        match insn.op() {
            Some(Opcode::CallInd) => break insn.imm,
            Some(Opcode::Call) | Some(Opcode::Jmp) => pc = insn.imm,
            Some(Opcode::Ret) | Some(Opcode::Halt) | None => return Err(DiscoveryError::NoCallInd(pc)),
            Some(_) => pc += INSN_LEN as u32,
        }
    };

    // (5) read the table at the walked-to offset; the sentinel only validates.
    let prefix_start = table_offset
        .checked_sub(TABLE_PREFIX_LEN)
        .ok_or(DiscoveryError::SentinelMismatch(table_offset))? as usize;
    let prefix = rodata
        .get(prefix_start..prefix_start + TABLE_PREFIX_LEN as usize)
        .ok_or(DiscoveryError::SentinelMismatch(table_offset))?;
    if prefix[..4] != TABLE_SENTINEL {
        return Err(DiscoveryError::SentinelMismatch(table_offset));
    }
    let count = u16::from_le_bytes([prefix[4], prefix[5]]);
    let start = table_offset as usize;
    let raw = rodata
        .get(start..start + 4 * count as usize)
        .ok_or(DiscoveryError::TableOutOfBounds(table_offset))?;
    let entries: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    // (6-7) skip the wrapper to reach the developer function.
    let mut functions = Vec::with_capacity(entries.len());
    for &entry in &entries {
        if !code_slot_ok(code, entry) {
            return Err(DiscoveryError::OutOfCode(entry));
        }
        if !is_wrapper(code, entry) {
            return Err(DiscoveryError::WrapperNotRecognized(entry));
        }
        let function = entry + WRAPPER_LEN;
        if !code_slot_ok(code, function) {
            return Err(DiscoveryError::OutOfCode(function));
        }
        functions.push(function);
    }

    Ok(EcallDiscovery {
        table: EcallTable {
            rodata_offset: table_offset,
            entries,
            count,
        },
        functions,
        walk,
    })
}

/// Declared kind of one ecall argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArgKind {
    Val,
    Ptr,
}

impl ArgKind {
    fn code(self) -> u8 {
        match self {
            ArgKind::Val => 1,
            ArgKind::Ptr => 2,
        }
    }

    fn from_code(b: u8) -> Option<Self> {
        match b {
            1 => Some(ArgKind::Val),
            2 => Some(ArgKind::Ptr),
            _ => None,
        }
    }
}

const UNKNOWN_ARGC: u8 = 0xFF;

/// META payload: `count u16 | per ecall: argc u8 (0xFF = undeclared) | argc kind bytes`.
pub fn encode_signatures(sigs: &[Option<Vec<ArgKind>>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(sigs.len() as u16).to_le_bytes());
    for sig in sigs {
        match sig {
            None => out.push(UNKNOWN_ARGC),
            Some(kinds) => {
                out.push(kinds.len() as u8);
                out.extend(kinds.iter().map(|k| k.code()));
            }
        }
    }
    out
}

/// Decodes the signature list from META. Returns `None` if META does not
/// hold a well-formed list.
pub fn decode_signatures(meta: &[u8]) -> Option<Vec<Option<Vec<ArgKind>>>> {
    let count = u16::from_le_bytes([*meta.first()?, *meta.get(1)?]) as usize;
    let mut pos = 2;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let argc = *meta.get(pos)?;
        pos += 1;
        if argc == UNKNOWN_ARGC {
            out.push(None);
            continue;
        }
        if argc as usize > MAX_ARGS {
            return None;
        }
        let kinds = meta
            .get(pos..pos + argc as usize)?
            .iter()
            .map(|b| ArgKind::from_code(*b))
            .collect::<Option<Vec<_>>>()?;
        pos += argc as usize;
        out.push(Some(kinds));
    }
    (pos == meta.len()).then_some(out)
}
