//! Free-space discovery in the CODE section.

use alloc::vec::Vec;

use super::image::EnclaveImage;
use super::isa::INSN_LEN;

/// Shortest run worth reporting: one instruction slot.
pub const MIN_CHUNK_LEN: u32 = INSN_LEN as u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fill {
    Zeroes,
    Ones,
}

impl Fill {
    pub fn byte(self) -> u8 {
        match self {
            Fill::Zeroes => 0x00,
            Fill::Ones => 0xFF,
        }
    }

    fn of(byte: u8) -> Option<Fill> {
        match byte {
            0x00 => Some(Fill::Zeroes),
            0xFF => Some(Fill::Ones),
            _ => None,
        }
    }
}

/// A maximal run of `0x00` or `0xFF` bytes inside CODE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FreeChunk {
    pub code_offset: u32,
    pub length: u32,
    pub fill: Fill,
}

impl FreeChunk {
    pub fn end(&self) -> u32 {
        self.code_offset + self.length
    }

    /// The instruction-aligned slots lying entirely inside the chunk, as a
    /// `[start, end)` byte range. Only these can host code.
    pub fn usable(&self) -> (u32, u32) {
        let step = INSN_LEN as u32;
        let start = self.code_offset.div_ceil(step) * step;
        let end = self.end() / step * step;
        if end > start {
            (start, end)
        } else {
            (start, start)
        }
    }

    pub fn usable_len(&self) -> u32 {
        let (s, e) = self.usable();
        e - s
    }
}

/// All maximal runs of `0x00`/`0xFF` of at least 8 bytes in CODE, sorted by
/// offset. Runs touching the instruction slot that holds the entry point are
/// dropped.
pub fn find_free_chunks(image: &EnclaveImage) -> Vec<FreeChunk> {
    let code = image.code();
    let entry_slot = image.entry_offset() / INSN_LEN as u32 * INSN_LEN as u32;
    let entry_end = entry_slot + INSN_LEN as u32;

    let mut chunks = Vec::new();
    let mut i = 0usize;
    while i < code.len() {
        let Some(fill) = Fill::of(code[i]) else {
            i += 1;
            continue;
        };
        let start = i;
        while i < code.len() && code[i] == fill.byte() {
            i += 1;
        }
        let chunk = FreeChunk {
            code_offset: start as u32,
            length: (i - start) as u32,
            fill,
        };
        let touches_entry = chunk.code_offset < entry_end && chunk.end() > entry_slot;
        if chunk.length >= MIN_CHUNK_LEN && !touches_entry {
            chunks.push(chunk);
        }
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::isa::Instruction;
    use alloc::vec;

    fn image_with_code(code: Vec<u8>) -> EnclaveImage {
        EnclaveImage::new(1, 0, code, vec![], vec![], vec![]).unwrap()
    }

    #[test]
    fn no_free_bytes_means_no_chunks() {
        let img = image_with_code(vec![0x12; 32]);
        assert!(find_free_chunks(&img).is_empty());
    }

    #[test]
    fn zero_then_ones_runs() {
        let mut code = Vec::new();
        code.extend_from_slice(&Instruction::jmp(0x10101010).encode());
        code.extend_from_slice(&Instruction::loadi(1, 0x11223344).encode());
        code.extend(core::iter::repeat_n(0x00, 24));
        code.extend(core::iter::repeat_n(0xFF, 8));
        let img = image_with_code(code);
        assert_eq!(
            find_free_chunks(&img),
            vec![
                FreeChunk {
                    code_offset: 16,
                    length: 24,
                    fill: Fill::Zeroes
                },
                FreeChunk {
                    code_offset: 40,
                    length: 8,
                    fill: Fill::Ones
                },
            ]
        );
    }

    #[test]
    fn runs_touching_entry_slot_are_excluded() {
        let mut code = vec![0u8; 24];
        code.extend_from_slice(&Instruction::ret().encode());
        let img = EnclaveImage::new(1, 24, code.clone(), vec![], vec![], vec![]).unwrap();
        // RET has 7 trailing zero bytes, but they sit in the entry slot with
        // the preceding run ending right before it.
        let chunks = find_free_chunks(&img);
        assert_eq!(
            chunks,
            vec![FreeChunk {
                code_offset: 0,
                length: 24,
                fill: Fill::Zeroes
            }]
        );

        let img = EnclaveImage::new(1, 8, code, vec![], vec![], vec![]).unwrap();
        assert!(find_free_chunks(&img).is_empty());
    }

    #[test]
    fn usable_range_is_aligned_interior() {
        let c = FreeChunk {
            code_offset: 9,
            length: 71,
            fill: Fill::Zeroes,
        };
        assert_eq!(c.usable(), (16, 80));
        let c = FreeChunk {
            code_offset: 1,
            length: 11,
            fill: Fill::Zeroes,
        };
        assert_eq!(c.usable_len(), 0);
    }
}
