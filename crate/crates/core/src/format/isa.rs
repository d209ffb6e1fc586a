//! Fixed-width instruction set of the toy enclave machine.
//!
//! Every instruction is 8 bytes: `opcode: u8 | a: u8 | b: u16 LE | imm: u32 LE`.
//! Jump and call targets are byte offsets into the CODE section.

use core::fmt;

/// Width of every encoded instruction.
pub const INSN_LEN: usize = 8;

/// Number of general purpose registers.
pub const REGISTER_COUNT: usize = 16;

/// Immediate the assembler places in HALT so that no instruction slot is
/// ever entirely `0x00`, which would make it indistinguishable from free space.
pub const HALT_FILLER: u32 = u32::from_le_bytes(*b"HALT");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Halt = 0x00,
    /// `r[a] <- imm`
    Loadi = 0x01,
    /// `r[a] <- mem32[r[b] + imm]`
    Load = 0x02,
    /// `mem32[r[b] + imm] <- r[a]`
    Store = 0x03,
    /// push return address, `pc <- imm`
    Call = 0x10,
    /// push return address, `pc <- table[r[a]]` where the table entries start
    /// at RODATA offset `imm`
    CallInd = 0x11,
    Ret = 0x12,
    Jmp = 0x13,
    /// `if r[a] == 0 { pc <- imm }`
    Brz = 0x14,
    /// copy `r[b]` bytes from `mem[r[a]]` to `mem[r[imm]]`
    Copy = 0x20,
    /// `r[a] <- (mem8[r[b]] == imm as u8)`
    Cmpb = 0x21,
    /// `r[a] <- r[b] + imm` (wrapping)
    Addi = 0x22,
    /// `r[a] <- 1` iff `[r[b], r[b] + imm)` is non-null and lies wholly in
    /// untrusted memory (the SDK's outside-enclave check)
    IsOut = 0x23,
    /// `r[a] <- r[a] ^ r[b]`
    Xor = 0x24,
}

impl Opcode {
    pub const ALL: [Opcode; 14] = [
        Opcode::Halt,
        Opcode::Loadi,
        Opcode::Load,
        Opcode::Store,
        Opcode::Call,
        Opcode::CallInd,
        Opcode::Ret,
        Opcode::Jmp,
        Opcode::Brz,
        Opcode::Copy,
        Opcode::Cmpb,
        Opcode::Addi,
        Opcode::IsOut,
        Opcode::Xor,
    ];

    pub fn from_byte(byte: u8) -> Option<Opcode> {
        Self::ALL.iter().copied().find(|op| *op as u8 == byte)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Halt => "HALT",
            Opcode::Loadi => "LOADI",
            Opcode::Load => "LOAD",
            Opcode::Store => "STORE",
            Opcode::Call => "CALL",
            Opcode::CallInd => "CALLIND",
            Opcode::Ret => "RET",
            Opcode::Jmp => "JMP",
            Opcode::Brz => "BRZ",
            Opcode::Copy => "COPY",
            Opcode::Cmpb => "CMPB",
            Opcode::Addi => "ADDI",
            Opcode::IsOut => "ISOUT",
            Opcode::Xor => "XOR",
        }
    }

    pub fn from_mnemonic(name: &str) -> Option<Opcode> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.mnemonic().eq_ignore_ascii_case(name))
    }

    /// Whether `imm` names a CODE offset the instruction may transfer control to.
    pub fn has_code_target(self) -> bool {
        matches!(self, Opcode::Call | Opcode::Jmp | Opcode::Brz)
    }
}

/// One decoded instruction. The opcode is kept as a raw byte: unknown opcodes
/// decode fine and only fault when executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: u8,
    pub a: u8,
    pub b: u16,
    pub imm: u32,
}

impl Instruction {
    pub const fn new(op: Opcode, a: u8, b: u16, imm: u32) -> Self {
        Instruction {
            opcode: op as u8,
            a,
            b,
            imm,
        }
    }

    pub const fn halt() -> Self {
        Self::new(Opcode::Halt, 0, 0, HALT_FILLER)
    }

    pub const fn loadi(reg: u8, imm: u32) -> Self {
        Self::new(Opcode::Loadi, reg, 0, imm)
    }

    pub const fn load(dst: u8, base: u8, off: u32) -> Self {
        Self::new(Opcode::Load, dst, base as u16, off)
    }

    pub const fn store(src: u8, base: u8, off: u32) -> Self {
        Self::new(Opcode::Store, src, base as u16, off)
    }

    pub const fn call(target: u32) -> Self {
        Self::new(Opcode::Call, 0, 0, target)
    }

    pub const fn call_ind(index_reg: u8, table: u32) -> Self {
        Self::new(Opcode::CallInd, index_reg, 0, table)
    }

    pub const fn ret() -> Self {
        Self::new(Opcode::Ret, 0, 0, 0)
    }

    pub const fn jmp(target: u32) -> Self {
        Self::new(Opcode::Jmp, 0, 0, target)
    }

    pub const fn brz(reg: u8, target: u32) -> Self {
        Self::new(Opcode::Brz, reg, 0, target)
    }

    pub const fn copy(src: u8, len: u8, dst: u8) -> Self {
        Self::new(Opcode::Copy, src, len as u16, dst as u32)
    }

    pub const fn cmpb(dst: u8, addr: u8, byte: u8) -> Self {
        Self::new(Opcode::Cmpb, dst, addr as u16, byte as u32)
    }

    pub const fn addi(dst: u8, src: u8, imm: u32) -> Self {
        Self::new(Opcode::Addi, dst, src as u16, imm)
    }

    pub const fn is_out(dst: u8, ptr: u8, len: u32) -> Self {
        Self::new(Opcode::IsOut, dst, ptr as u16, len)
    }

    pub const fn xor(dst: u8, src: u8) -> Self {
        Self::new(Opcode::Xor, dst, src as u16, 0)
    }

    pub fn op(&self) -> Option<Opcode> {
        Opcode::from_byte(self.opcode)
    }

    pub fn encode(&self) -> [u8; INSN_LEN] {
        let mut out = [0u8; INSN_LEN];
        out[0] = self.opcode;
        out[1] = self.a;
        out[2..4].copy_from_slice(&self.b.to_le_bytes());
        out[4..8].copy_from_slice(&self.imm.to_le_bytes());
        out
    }

    /// Decodes the first 8 bytes of `bytes`. Panics if fewer are given.
    pub fn decode(bytes: &[u8]) -> Instruction {
        Instruction {
            opcode: bytes[0],
            a: bytes[1],
            b: u16::from_le_bytes([bytes[2], bytes[3]]),
            imm: u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        }
    }

    /// Decodes the instruction at `offset` of a code buffer, if it fits.
    pub fn fetch(code: &[u8], offset: u32) -> Option<Instruction> {
        let start = offset as usize;
        let end = start.checked_add(INSN_LEN)?;
        code.get(start..end).map(Instruction::decode)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Some(op) = self.op() else {
            return write!(f, ".byte {:#04x} ; unknown opcode", self.opcode);
        };
        let m = op.mnemonic();
        match op {
            Opcode::Halt | Opcode::Ret => f.write_str(m),
            Opcode::Loadi => write!(f, "{m} r{}, {:#x}", self.a, self.imm),
            Opcode::Load | Opcode::Store | Opcode::Addi | Opcode::IsOut => {
                write!(f, "{m} r{}, r{}, {:#x}", self.a, self.b, self.imm)
            }
            Opcode::Call | Opcode::Jmp => write!(f, "{m} {:#x}", self.imm),
            Opcode::CallInd | Opcode::Brz => write!(f, "{m} r{}, {:#x}", self.a, self.imm),
            Opcode::Copy => write!(f, "{m} r{}, r{}, r{}", self.a, self.b, self.imm),
            Opcode::Cmpb => write!(f, "{m} r{}, r{}, {:#04x}", self.a, self.b, self.imm),
            Opcode::Xor => write!(f, "{m} r{}, r{}", self.a, self.b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_is_little_endian() {
        let insn = Instruction::new(Opcode::Addi, 3, 0x0102, 0xAABB_CCDD);
        assert_eq!(insn.encode(), [0x22, 3, 0x02, 0x01, 0xDD, 0xCC, 0xBB, 0xAA]);
        assert_eq!(Instruction::decode(&insn.encode()), insn);
    }

    #[test]
    fn no_emitted_instruction_is_all_zero_or_all_ones() {
        // HALT with zero operands would look like free space.
        assert_ne!(Instruction::halt().encode(), [0u8; 8]);
        for op in Opcode::ALL {
            let enc = Instruction::new(op, 0, 0, 0).encode();
            assert_ne!(enc, [0xFF; 8]);
            if op != Opcode::Halt {
                assert_ne!(enc[0], 0);
            }
        }
    }

    #[test]
    fn unknown_opcode_decodes() {
        let insn = Instruction::decode(&[0x7F, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(insn.op(), None);
    }

    #[test]
    fn mnemonic_lookup_is_case_insensitive() {
        assert_eq!(Opcode::from_mnemonic("callind"), Some(Opcode::CallInd));
        assert_eq!(Opcode::from_mnemonic("NOPE"), None);
    }
}
