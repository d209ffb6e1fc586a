//! Placing a payload into free CODE chunks and wiring the HOOK/BACK jumps.

use alloc::vec::Vec;
use core::fmt;

use crate::format::{find_free_chunks, EnclaveImage, FreeChunk, Instruction, Opcode, SectionKind, INSN_LEN};

const STEP: u32 = INSN_LEN as u32;

/// Patch code plus the positions of its payload-relative jump targets.
///
/// `relocations` lists byte offsets of instructions (inside `code`) whose
/// `imm` is a byte offset into the payload rather than a CODE offset. They are
/// rebased when the payload is split and placed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatchPayload {
    pub code: Vec<u8>,
    pub relocations: Vec<u32>,
}

impl PatchPayload {
    /// Position-independent bytes with no internal jumps.
    pub fn raw(code: Vec<u8>) -> Self {
        PatchPayload {
            code,
            relocations: Vec::new(),
        }
    }

    /// The smallest useful patch: just the displaced instruction.
    pub fn noop(saved: Instruction) -> Self {
        PatchPayload::raw(saved.encode().to_vec())
    }

    pub fn len(&self) -> u32 {
        self.code.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn instruction_count(&self) -> usize {
        self.code.len() / INSN_LEN
    }
}

/// One placed piece of the payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub chunk: FreeChunk,
    /// CODE offset where `bytes` are written (start of the chunk's aligned slots).
    pub offset: u32,
    /// Payload instructions followed by a link JMP or the final JMP BACK.
    pub bytes: Vec<u8>,
}

impl Fragment {
    pub fn end(&self) -> u32 {
        self.offset + self.bytes.len() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    pub hook_site: u32,
    pub saved_instruction: [u8; INSN_LEN],
    pub back_offset: u32,
    pub fragments: Vec<Fragment>,
}

impl PatchPlan {
    /// Where HOOK jumps.
    pub fn entry(&self) -> u32 {
        self.fragments[0].offset
    }

    /// Bytes written into free space, links and BACK included.
    pub fn bytes_used(&self) -> u32 {
        self.fragments.iter().map(|f| f.bytes.len() as u32).sum()
    }

    pub fn link_count(&self) -> usize {
        self.fragments.len() - 1
    }
}

impl fmt::Display for PatchPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let saved = Instruction::decode(&self.saved_instruction);
        writeln!(f, "hook site   {:#06x}  (saved: {saved})", self.hook_site)?;
        writeln!(f, "back        {:#06x}", self.back_offset)?;
        writeln!(
            f,
            "fragments   {}  ({} bytes used, {} link jump(s))",
            self.fragments.len(),
            self.bytes_used(),
            self.link_count()
        )?;
        for (i, frag) in self.fragments.iter().enumerate() {
            let last = Instruction::fetch(&frag.bytes, frag.bytes.len() as u32 - STEP).unwrap();
            writeln!(
                f,
                "  [{i}] {:#06x}..{:#06x} in chunk {:#06x}+{} ({:?}), ends {}",
                frag.offset,
                frag.end(),
                frag.chunk.code_offset,
                frag.chunk.length,
                frag.chunk.fill,
                last
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PatchError {
    #[error("hook site {0:#x} is not an instruction slot inside CODE")]
    BadHookSite(u32),
    #[error("payload length {0} is not a positive multiple of 8")]
    BadPayloadLength(u32),
    #[error("relocation at {0:#x} does not point at a payload jump target")]
    BadRelocation(u32),
    #[error("not enough free space: {shortfall} more bytes needed ({needed} required, {available} usable)")]
    InsufficientFreeSpace {
        needed: u32,
        available: u32,
        shortfall: u32,
    },
    #[error("plan does not match image: {0}")]
    PlanMismatch(&'static str),
}

fn check_hook(image: &EnclaveImage, hook_site: u32) -> Result<Instruction, PatchError> {
    if !hook_site.is_multiple_of(STEP) {
        return Err(PatchError::BadHookSite(hook_site));
    }
    Instruction::fetch(image.code(), hook_site).ok_or(PatchError::BadHookSite(hook_site))
}

/// Greedy first-fit placement of `payload` into the image's free chunks, in
/// offset order.
///
/// A chunk either takes everything that is left plus the JMP BACK, or (with at
/// least two slots) as many instructions as fit plus a link JMP to the next
/// fragment. The payload is expected to contain the displaced instruction
/// itself.
pub fn plan_patch(image: &EnclaveImage, payload: &PatchPayload, hook_site: u32) -> Result<PatchPlan, PatchError> {
    let saved = check_hook(image, hook_site)?;
    let len = payload.len();
    if len == 0 || !len.is_multiple_of(STEP) {
        return Err(PatchError::BadPayloadLength(len));
    }
    let total = payload.instruction_count();
    for &r in &payload.relocations {
        let ok = r % STEP == 0
            && Instruction::fetch(&payload.code, r)
                .is_some_and(|i| i.imm % STEP == 0 && (i.imm as usize) < payload.code.len());
        if !ok {
            return Err(PatchError::BadRelocation(r));
        }
    }

    let chunks: Vec<FreeChunk> = find_free_chunks(image)
        .into_iter()
        .filter(|c| {
            let (s, e) = c.usable();
            e > s && !(s <= hook_site && hook_site < e)
        })
        .collect();

    // First pass: decide how many instructions go into each chunk.
    let mut placement: Vec<(FreeChunk, usize, usize)> = Vec::new();
    let mut next = 0usize;
    for chunk in &chunks {
        if next == total {
            break;
        }
        let slots = (chunk.usable_len() / STEP) as usize;
        let remaining = total - next;
        if remaining < slots {
            placement.push((*chunk, next, total));
            next = total;
        } else if slots >= 2 {
            placement.push((*chunk, next, next + slots - 1));
            next += slots - 1;
        }
    }
    if next < total {
        let available: u32 = chunks.iter().map(|c| c.usable_len()).sum();
        let needed = len + STEP + STEP * placement.len() as u32;
        return Err(PatchError::InsufficientFreeSpace {
            needed,
            available,
            shortfall: ((total - next) as u32 + 1) * STEP,
        });
    }

    // Where each payload instruction ends up.
    let mut address = Vec::with_capacity(total);
    for (chunk, from, to) in &placement {
        let start = chunk.usable().0;
        for k in 0..(to - from) {
            address.push(start + k as u32 * STEP);
        }
    }

    let mut insns: Vec<Instruction> = (0..total)
        .map(|k| Instruction::fetch(&payload.code, k as u32 * STEP).unwrap())
        .collect();
    for &r in &payload.relocations {
        let k = (r / STEP) as usize;
        insns[k].imm = address[(insns[k].imm / STEP) as usize];
    }

    let back_offset = hook_site + STEP;
    let fragments = placement
        .iter()
        .enumerate()
        .map(|(i, (chunk, from, to))| {
            let mut bytes = Vec::with_capacity((to - from + 1) * INSN_LEN);
            for insn in &insns[*from..*to] {
                bytes.extend_from_slice(&insn.encode());
            }
            let tail = match placement.get(i + 1) {
                Some((next_chunk, ..)) => next_chunk.usable().0,
                None => back_offset,
            };
            bytes.extend_from_slice(&Instruction::jmp(tail).encode());
            Fragment {
                chunk: *chunk,
                offset: chunk.usable().0,
                bytes,
            }
        })
        .collect();

    Ok(PatchPlan {
        hook_site,
        saved_instruction: saved.encode(),
        back_offset,
        fragments,
    })
}

/// Writes the fragments and the HOOK jump. Size and section layout are unchanged.
pub fn apply_patch(image: &EnclaveImage, plan: &PatchPlan) -> Result<EnclaveImage, PatchError> {
    let hook = check_hook(image, plan.hook_site)?;
    if hook.encode() != plan.saved_instruction {
        return Err(PatchError::PlanMismatch(
            "hook site no longer holds the saved instruction",
        ));
    }
    let code_len = image.code().len() as u32;
    for frag in &plan.fragments {
        if frag.end() > code_len || frag.offset < frag.chunk.code_offset || frag.end() > frag.chunk.end() {
            return Err(PatchError::PlanMismatch("fragment outside its chunk"));
        }
        let fill = frag.chunk.fill.byte();
        if image.code()[frag.offset as usize..frag.end() as usize]
            .iter()
            .any(|b| *b != fill)
        {
            return Err(PatchError::PlanMismatch("fragment range is no longer free"));
        }
        if frag.offset <= plan.hook_site && plan.hook_site < frag.end() {
            return Err(PatchError::PlanMismatch("fragment overlaps the hook site"));
        }
    }

    let mut out = image.clone();
    let code = out.payload_mut(SectionKind::Code);
    for frag in &plan.fragments {
        code[frag.offset as usize..frag.end() as usize].copy_from_slice(&frag.bytes);
    }
    let hook_at = plan.hook_site as usize;
    code[hook_at..hook_at + INSN_LEN].copy_from_slice(&Instruction::jmp(plan.entry()).encode());
    Ok(out)
}

/// Byte ranges `apply_patch` is allowed to modify.
pub fn touched_ranges(plan: &PatchPlan) -> Vec<(u32, u32)> {
    let mut ranges = Vec::with_capacity(plan.fragments.len() + 1);
    ranges.push((plan.hook_site, plan.hook_site + STEP));
    ranges.extend(plan.fragments.iter().map(|f| (f.offset, f.end())));
    ranges
}

/// Incremental builder for payloads with symbolic internal labels.
#[derive(Default)]
pub(crate) struct PayloadBuilder {
    insns: Vec<Instruction>,
    // (instruction index, label id)
    fixups: Vec<(usize, usize)>,
    labels: Vec<Option<usize>>,
}

#[derive(Clone, Copy)]
pub(crate) struct Label(usize);

impl PayloadBuilder {
    pub fn label(&mut self) -> Label {
        self.labels.push(None);
        Label(self.labels.len() - 1)
    }

    pub fn bind(&mut self, l: Label) {
        self.labels[l.0] = Some(self.insns.len());
    }

    pub fn emit(&mut self, insn: Instruction) {
        self.insns.push(insn);
    }

    /// Emits a JMP/BRZ whose target is a payload label.
    pub fn emit_to(&mut self, insn: Instruction, target: Label) {
        debug_assert!(matches!(insn.op(), Some(Opcode::Jmp | Opcode::Brz)));
        self.fixups.push((self.insns.len(), target.0));
        self.insns.push(insn);
    }

    pub fn finish(mut self) -> PatchPayload {
        let mut relocations = Vec::with_capacity(self.fixups.len());
        for (at, label) in &self.fixups {
            let index = self.labels[*label].expect("payload label bound");
            self.insns[*at].imm = index as u32 * STEP;
            relocations.push(*at as u32 * STEP);
        }
        let mut code = Vec::with_capacity(self.insns.len() * INSN_LEN);
        for insn in &self.insns {
            code.extend_from_slice(&insn.encode());
        }
        PatchPayload { code, relocations }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::Fill;

    /// CODE = hook instruction, then a `a`-byte 00 chunk, a separator, a `b`-byte ff chunk, RET.
    fn image_with_chunks(a: usize, b: usize) -> EnclaveImage {
        let mut code = Vec::new();
        code.extend_from_slice(&Instruction::loadi(1, 7).encode());
        code.extend_from_slice(&Instruction::loadi(2, 9).encode());
        code.extend(core::iter::repeat_n(0x00, a));
        code.extend_from_slice(&Instruction::loadi(3, 3).encode());
        code.extend(core::iter::repeat_n(0xFF, b));
        code.extend_from_slice(&Instruction::ret().encode());
        EnclaveImage::new(1, 0, code, Vec::new(), Vec::new(), Vec::new()).unwrap()
    }

    fn payload_of(n: usize) -> PatchPayload {
        let mut code = Vec::new();
        for i in 0..n {
            code.extend_from_slice(&Instruction::addi(4, 4, i as u32 + 1).encode());
        }
        PatchPayload::raw(code)
    }

    #[test]
    fn single_chunk_uses_payload_plus_back_jump() {
        let img = image_with_chunks(64, 0);
        let plan = plan_patch(&img, &payload_of(3), 8).unwrap();
        assert_eq!(plan.fragments.len(), 1);
        assert_eq!(plan.bytes_used(), 32);
        assert_eq!(plan.back_offset, 16);
        let tail = Instruction::fetch(&plan.fragments[0].bytes, 24).unwrap();
        assert_eq!(tail, Instruction::jmp(16));
    }

    #[test]
    fn split_across_two_chunks_links_once() {
        let img = image_with_chunks(32, 40);
        let plan = plan_patch(&img, &payload_of(6), 0).unwrap();
        assert_eq!(plan.fragments.len(), 2);
        assert_eq!(plan.bytes_used(), 48 + 8 + 8);
        let first = &plan.fragments[0];
        let link = Instruction::fetch(&first.bytes, first.bytes.len() as u32 - 8).unwrap();
        assert_eq!(link, Instruction::jmp(plan.fragments[1].offset));
        assert_eq!(plan.fragments[1].chunk.fill, Fill::Ones);
    }

    #[test]
    fn too_large_reports_shortfall() {
        let img = image_with_chunks(16, 0);
        match plan_patch(&img, &payload_of(4), 0) {
            Err(PatchError::InsufficientFreeSpace { shortfall, .. }) => assert!(shortfall > 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn apply_rejects_stale_plan() {
        let img = image_with_chunks(64, 0);
        let plan = plan_patch(&img, &payload_of(2), 8).unwrap();
        let patched = apply_patch(&img, &plan).unwrap();
        assert!(matches!(apply_patch(&patched, &plan), Err(PatchError::PlanMismatch(_))));
    }

    #[test]
    fn relocations_follow_instructions_across_splits() {
        let img = image_with_chunks(24, 40);
        let mut b = PayloadBuilder::default();
        let end = b.label();
        b.emit(Instruction::loadi(4, 0));
        b.emit(Instruction::addi(4, 4, 1));
        b.emit_to(Instruction::jmp(0), end);
        b.emit(Instruction::addi(4, 4, 2));
        b.bind(end);
        b.emit(Instruction::addi(4, 4, 3));
        let plan = plan_patch(&img, &b.finish(), 0).unwrap();
        // Chunk 1 holds two instructions + link, chunk 2 the rest.
        let second = &plan.fragments[1];
        let jmp = Instruction::fetch(&second.bytes, 0).unwrap();
        assert_eq!(jmp, Instruction::jmp(second.offset + 16));
    }
}
