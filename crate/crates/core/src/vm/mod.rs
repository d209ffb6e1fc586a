//! Deterministic interpreter for loaded enclaves.
//!
//! Memory is two disjoint ranges: untrusted (`[0, untrusted_len)`) and the
//! enclave range starting at [`ENCLAVE_BASE`]. Enclave code may touch both;
//! the untrusted agent may only touch the first.

mod agent;

use alloc::vec;
use alloc::vec::Vec;

pub use agent::{hexdump, run_with_agent, AgentAction, Outcome, Snapshot, Transcript, TranscriptEvent, UntrustedAgent};

use crate::format::abi::{SectionMap, FIRST_ARG_REG, FRAME_REG, FRAME_SIZE, INDEX_REG, MAX_ARGS};
use crate::format::isa::REGISTER_COUNT;
use crate::format::{EnclaveImage, Instruction, Opcode, INSN_LEN};
use crate::signing::LoadedEnclave;

pub use crate::format::abi::{ENCLAVE_BASE, UNTRUSTED_BASE};

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
/// Instructions executed between agent turns.
pub const QUANTUM: u64 = 64;
const MAX_CALL_DEPTH: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryLayout {
    pub untrusted_base: u32,
    pub untrusted_len: u32,
    pub enclave_base: u32,
    pub enclave_len: u32,
    pub stack_top: u32,
    /// Buffers the harness hands to ecalls; used for reporting.
    pub out_buffers: Vec<(u32, u32)>,
}

impl Default for MemoryLayout {
    fn default() -> Self {
        MemoryLayout {
            untrusted_base: UNTRUSTED_BASE,
            untrusted_len: 0x1_0000,
            enclave_base: ENCLAVE_BASE,
            enclave_len: 0x1_0000,
            stack_top: ENCLAVE_BASE + 0x1_0000 - 16,
            out_buffers: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointerClass {
    Trusted,
    Untrusted,
    Invalid,
}

fn in_range(base: u32, len: u32, addr: u32, n: u32) -> bool {
    let (base, len, addr, n) = (base as u64, len as u64, addr as u64, n as u64);
    addr >= base && addr + n <= base + len
}

pub fn classify_pointer(layout: &MemoryLayout, addr: u32) -> PointerClass {
    if in_range(layout.untrusted_base, layout.untrusted_len, addr, 1) {
        PointerClass::Untrusted
    } else if in_range(layout.enclave_base, layout.enclave_len, addr, 1) {
        PointerClass::Trusted
    } else {
        PointerClass::Invalid
    }
}

impl MemoryLayout {
    pub fn with_out_buffer(mut self, addr: u32, len: u32) -> Self {
        self.out_buffers.push((addr, len));
        self
    }

    /// True iff `[addr, addr+len)` lies wholly in the untrusted range.
    pub fn is_untrusted(&self, addr: u32, len: u32) -> bool {
        in_range(self.untrusted_base, self.untrusted_len, addr, len)
    }

    pub fn is_trusted(&self, addr: u32, len: u32) -> bool {
        in_range(self.enclave_base, self.enclave_len, addr, len)
    }

    fn validate(&self) -> Result<(), VmError> {
        let u_end = self.untrusted_base as u64 + self.untrusted_len as u64;
        let e_end = self.enclave_base as u64 + self.enclave_len as u64;
        let disjoint = u_end <= self.enclave_base as u64 || e_end <= self.untrusted_base as u64;
        let stack_ok = self.is_trusted(self.stack_top.wrapping_sub(2 * FRAME_SIZE), 2 * FRAME_SIZE);
        if !disjoint || !stack_ok || e_end > u32::MAX as u64 + 1 {
            return Err(VmError::BadLayout);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum Fault {
    #[error("bad opcode {byte:#04x} at {pc:#x}")]
    BadOpcode { pc: u32, byte: u8 },
    #[error("bad operand at {pc:#x}")]
    BadOperand { pc: u32 },
    #[error("out-of-bounds access to {addr:#x}+{len} at {pc:#x}")]
    OutOfBoundsAccess { pc: u32, addr: u32, len: u32 },
    #[error("write to read-only enclave memory {addr:#x} at {pc:#x}")]
    ReadOnlyWrite { pc: u32, addr: u32 },
    #[error("untrusted access to enclave memory {addr:#x}+{len}")]
    UntrustedAccess { addr: u32, len: u32 },
    #[error("pc {0:#x} outside CODE")]
    PcOutOfCode(u32),
    #[error("ecall index {index} beyond table of {count}")]
    Dispatch { index: u32, count: u32 },
    #[error("call stack overflow at {0:#x}")]
    CallDepth(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VmError {
    #[error("image needs {needed} bytes of enclave memory, layout provides {available}")]
    ImageTooLarge { needed: u64, available: u64 },
    #[error("memory layout is inconsistent")]
    BadLayout,
    #[error("at most {MAX_ARGS} ecall arguments")]
    TooManyArgs,
    #[error("fault: {0}")]
    Fault(#[from] Fault),
    #[error("step budget of {0} exhausted")]
    BudgetExceeded(u64),
    #[error("deadlock after {0} steps: enclave spinning, agent has nothing left to do")]
    Deadlock(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Completion {
    /// r0 at exit.
    pub return_value: u32,
    pub steps: u64,
    pub halted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EcallRequest<'a> {
    pub index: u16,
    pub args: &'a [u32],
}

pub(crate) enum Step {
    Running,
    Done(Completion),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VmState {
    pub layout: MemoryLayout,
    pub sections: SectionMap,
    code_len: u32,
    entry: u32,
    pub pc: u32,
    pub regs: [u32; REGISTER_COUNT],
    untrusted: Vec<u8>,
    enclave: Vec<u8>,
    pub call_stack: Vec<u32>,
    pub steps_executed: u64,
    pub halted: bool,
    watchpoints: Vec<u32>,
    snapshots: Vec<Snapshot>,
}

/// Loads an enclave that passed `verify_and_load`.
pub fn load(enclave: &LoadedEnclave, layout: MemoryLayout) -> Result<VmState, VmError> {
    VmState::from_image(&enclave.image, layout)
}

impl VmState {
    /// Maps an image without any signature check (test harness use).
    pub fn from_image(image: &EnclaveImage, layout: MemoryLayout) -> Result<Self, VmError> {
        layout.validate()?;
        let code_len = image.code().len() as u32;
        let sections = SectionMap::new(code_len, image.rodata().len() as u32, image.rwdata().len() as u32);
        if layout.enclave_base != ENCLAVE_BASE {
            return Err(VmError::BadLayout);
        }
        // The image and the two lowest stack frames (frame + scratch) must not meet.
        let lowest_frame = layout.stack_top - 2 * FRAME_SIZE;
        if sections.end > lowest_frame {
            let stack_reserve = (ENCLAVE_BASE + layout.enclave_len - lowest_frame) as u64;
            return Err(VmError::ImageTooLarge {
                needed: (sections.end - ENCLAVE_BASE) as u64 + stack_reserve,
                available: layout.enclave_len as u64,
            });
        }
        let mut enclave = vec![0u8; layout.enclave_len as usize];
        let put = |mem: &mut Vec<u8>, at: u32, bytes: &[u8]| {
            let off = (at - ENCLAVE_BASE) as usize;
            mem[off..off + bytes.len()].copy_from_slice(bytes);
        };
        put(&mut enclave, sections.code, image.code());
        put(&mut enclave, sections.rodata, image.rodata());
        put(&mut enclave, sections.rwdata, image.rwdata());
        Ok(VmState {
            untrusted: vec![0u8; layout.untrusted_len as usize],
            layout,
            sections,
            code_len,
            entry: image.entry_offset(),
            pc: 0,
            regs: [0; REGISTER_COUNT],
            enclave,
            call_stack: Vec::new(),
            steps_executed: 0,
            halted: false,
            watchpoints: Vec::new(),
            snapshots: Vec::new(),
        })
    }

    /// Loaded CODE bytes.
    pub fn code(&self) -> &[u8] {
        &self.enclave[..self.code_len as usize]
    }

    /// Records a [`Snapshot`] each time execution reaches `pc`.
    pub fn watch(&mut self, pc: u32) {
        self.watchpoints.push(pc);
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn frame_base(&self) -> u32 {
        self.layout.stack_top - FRAME_SIZE
    }

    // Untrusted-side accessors: anything outside the untrusted range faults.

    pub fn read_untrusted(&self, addr: u32, len: u32) -> Result<&[u8], Fault> {
        if !self.layout.is_untrusted(addr, len) {
            return Err(Fault::UntrustedAccess { addr, len });
        }
        let off = (addr - self.layout.untrusted_base) as usize;
        Ok(&self.untrusted[off..off + len as usize])
    }

    pub fn write_untrusted(&mut self, addr: u32, bytes: &[u8]) -> Result<(), Fault> {
        let len = bytes.len() as u32;
        if !self.layout.is_untrusted(addr, len) {
            return Err(Fault::UntrustedAccess { addr, len });
        }
        let off = (addr - self.layout.untrusted_base) as usize;
        self.untrusted[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn untrusted_memory(&self) -> &[u8] {
        &self.untrusted
    }

    /// Debug view of enclave memory for test oracles. Not available to the agent.
    pub fn debug_read_enclave(&self, addr: u32, len: u32) -> Option<&[u8]> {
        if !self.layout.is_trusted(addr, len) {
            return None;
        }
        let off = (addr - self.layout.enclave_base) as usize;
        Some(&self.enclave[off..off + len as usize])
    }

    // Enclave-side memory.

    fn slice(&self, pc: u32, addr: u32, len: u32) -> Result<&[u8], Fault> {
        if self.layout.is_untrusted(addr, len) {
            let off = (addr - self.layout.untrusted_base) as usize;
            Ok(&self.untrusted[off..off + len as usize])
        } else if self.layout.is_trusted(addr, len) {
            let off = (addr - self.layout.enclave_base) as usize;
            Ok(&self.enclave[off..off + len as usize])
        } else {
            Err(Fault::OutOfBoundsAccess { pc, addr, len })
        }
    }

    fn slice_mut(&mut self, pc: u32, addr: u32, len: u32) -> Result<&mut [u8], Fault> {
        if self.layout.is_untrusted(addr, len) {
            let off = (addr - self.layout.untrusted_base) as usize;
            Ok(&mut self.untrusted[off..off + len as usize])
        } else if self.layout.is_trusted(addr, len) {
            if len > 0 && addr < self.sections.rwdata {
                return Err(Fault::ReadOnlyWrite { pc, addr });
            }
            let off = (addr - self.layout.enclave_base) as usize;
            Ok(&mut self.enclave[off..off + len as usize])
        } else {
            Err(Fault::OutOfBoundsAccess { pc, addr, len })
        }
    }

    fn load32(&self, pc: u32, addr: u32) -> Result<u32, Fault> {
        Ok(u32::from_le_bytes(self.slice(pc, addr, 4)?.try_into().unwrap()))
    }

    fn store32(&mut self, pc: u32, addr: u32, value: u32) -> Result<(), Fault> {
        self.slice_mut(pc, addr, 4)?.copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    /// Sets up an ecall: registers cleared, index in r0, arguments in r1..
    /// and mirrored into a fresh frame at `r15`.
    pub fn enter(&mut self, request: EcallRequest<'_>) -> Result<(), VmError> {
        if request.args.len() > MAX_ARGS {
            return Err(VmError::TooManyArgs);
        }
        self.regs = [0; REGISTER_COUNT];
        self.regs[INDEX_REG as usize] = request.index as u32;
        for (i, a) in request.args.iter().enumerate() {
            self.regs[FIRST_ARG_REG as usize + i] = *a;
        }
        let frame = self.frame_base();
        self.regs[FRAME_REG as usize] = frame;
        let off = (frame - self.layout.enclave_base) as usize;
        self.enclave[off..off + FRAME_SIZE as usize].fill(0);
        for (i, a) in request.args.iter().enumerate() {
            self.enclave[off + 4 * i..off + 4 * i + 4].copy_from_slice(&a.to_le_bytes());
        }
        self.pc = self.entry;
        self.call_stack.clear();
        self.halted = false;
        self.steps_executed = 0;
        Ok(())
    }

    fn snapshot(&mut self) {
        let base = self.regs[FRAME_REG as usize];
        let frame = self
            .slice(self.pc, base, FRAME_SIZE)
            .map(|s| s.to_vec())
            .unwrap_or_default();
        self.snapshots.push(Snapshot {
            pc: self.pc,
            step: self.steps_executed,
            regs: self.regs,
            frame_base: base,
            frame,
        });
    }

    /// Executes one instruction.
    pub(crate) fn step(&mut self) -> Result<Step, Fault> {
        let pc = self.pc;
        if self.watchpoints.contains(&pc) {
            self.snapshot();
        }
        let insn = Instruction::fetch(self.code(), pc).ok_or(Fault::PcOutOfCode(pc))?;
        if !pc.is_multiple_of(INSN_LEN as u32) {
            return Err(Fault::PcOutOfCode(pc));
        }
        let op = insn.op().ok_or(Fault::BadOpcode { pc, byte: insn.opcode })?;
        let a = insn.a as usize;
        let b = insn.b as usize;
        if a >= REGISTER_COUNT || (b >= REGISTER_COUNT && op.uses_register_b()) {
            return Err(Fault::BadOperand { pc });
        }
        self.steps_executed += 1;
        let mut next = pc + INSN_LEN as u32;
        let r = self.regs;
        match op {
            Opcode::Halt => {
                self.halted = true;
                return Ok(Step::Done(self.completion()));
            }
            Opcode::Loadi => self.regs[a] = insn.imm,
            Opcode::Load => self.regs[a] = self.load32(pc, r[b].wrapping_add(insn.imm))?,
            Opcode::Store => self.store32(pc, r[b].wrapping_add(insn.imm), r[a])?,
            Opcode::Call => {
                self.push(pc, next)?;
                next = insn.imm;
            }
            Opcode::CallInd => {
                let table = self.sections.rodata.wrapping_add(insn.imm);
                let count = u16::from_le_bytes(self.slice(pc, table.wrapping_sub(2), 2)?.try_into().unwrap()) as u32;
                let index = r[a];
                if index >= count {
                    return Err(Fault::Dispatch { index, count });
                }
                let target = self.load32(pc, table + 4 * index)?;
                self.push(pc, next)?;
                next = target;
            }
            Opcode::Ret => match self.call_stack.pop() {
                Some(ret) => next = ret,
                None => return Ok(Step::Done(self.completion())),
            },
            Opcode::Jmp => next = insn.imm,
            Opcode::Brz => {
                if r[a] == 0 {
                    next = insn.imm;
                }
            }
            Opcode::Copy => {
                let dst_reg = insn.imm as usize;
                if dst_reg >= REGISTER_COUNT {
                    return Err(Fault::BadOperand { pc });
                }
                let (src, len, dst) = (r[a], r[b], r[dst_reg]);
                let data = self.slice(pc, src, len)?.to_vec();
                self.slice_mut(pc, dst, len)?.copy_from_slice(&data);
            }
            Opcode::Cmpb => {
                let byte = self.slice(pc, r[b], 1)?[0];
                self.regs[a] = (byte == insn.imm as u8) as u32;
            }
            Opcode::Addi => self.regs[a] = r[b].wrapping_add(insn.imm),
            Opcode::IsOut => {
                let ptr = r[b];
                self.regs[a] = (ptr != 0 && self.layout.is_untrusted(ptr, insn.imm)) as u32;
            }
            Opcode::Xor => self.regs[a] ^= r[b],
        }
        self.pc = next;
        Ok(Step::Running)
    }

    fn push(&mut self, pc: u32, ret: u32) -> Result<(), Fault> {
        if self.call_stack.len() >= MAX_CALL_DEPTH {
            return Err(Fault::CallDepth(pc));
        }
        self.call_stack.push(ret);
        Ok(())
    }

    fn completion(&self) -> Completion {
        Completion {
            return_value: self.regs[INDEX_REG as usize],
            steps: self.steps_executed,
            halted: self.halted,
        }
    }

    /// Runs an ecall to completion with no agent.
    pub fn ecall(&mut self, index: u16, args: &[u32]) -> Result<Completion, VmError> {
        self.ecall_with_budget(index, args, DEFAULT_STEP_BUDGET)
    }

    pub fn ecall_with_budget(&mut self, index: u16, args: &[u32], budget: u64) -> Result<Completion, VmError> {
        self.enter(EcallRequest { index, args })?;
        while self.steps_executed < budget {
            if let Step::Done(c) = self.step()? {
                return Ok(c);
            }
        }
        Err(VmError::BudgetExceeded(budget))
    }
}

impl Opcode {
    fn uses_register_b(self) -> bool {
        matches!(
            self,
            Opcode::Load | Opcode::Store | Opcode::Copy | Opcode::Cmpb | Opcode::Addi | Opcode::IsOut | Opcode::Xor
        )
    }
}
