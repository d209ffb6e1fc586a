//! The toy enclave container, its instruction set and assembler, and the
//! structural scans an attacker runs over a compiled image.

pub mod abi;
pub mod asm;
pub mod ecall;
pub mod image;
pub mod isa;
pub mod scan;

pub use asm::{assemble, AsmError, AsmErrorKind, Assembly, EcallSymbol, Symbol, SymbolMap};
pub use ecall::{locate_ecall_table, ArgKind, DiscoveryError, EcallDiscovery, EcallTable};
pub use image::{EnclaveImage, FormatError, Header, Section, SectionKind, HEADER_LEN, SECTION_PREFIX_LEN};
pub use isa::{Instruction, Opcode, INSN_LEN};
pub use scan::{find_free_chunks, Fill, FreeChunk};
