//! Bundled enclave sources, the toy stream cipher used by `remote-decrypt`,
//! and a seeded generator of random well-formed programs.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MINIMAL: &str = include_str!("../samples/minimal.seta");
pub const REMOTE_DECRYPT: &str = include_str!("../samples/remote-decrypt.seta");
pub const KEYSTORE: &str = include_str!("../samples/keystore.seta");

pub const SAMPLES: [(&str, &str); 3] = [
    ("minimal", MINIMAL),
    ("remote-decrypt", REMOTE_DECRYPT),
    ("keystore", KEYSTORE),
];

pub fn sample(name: &str) -> Option<&'static str> {
    SAMPLES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Ecall indices and sizes in `remote-decrypt`.
pub mod remote_decrypt {
    pub const DECRYPT: u16 = 0;
    pub const STATUS: u16 = 1;
    pub const BLOCK_LEN: usize = 32;
    /// The provisioned session key, as it appears in the sample's RWDATA.
    pub const SESSION_KEY: [u8; 32] = [
        0x3a, 0x91, 0xc4, 0xe0, 0x7b, 0x22, 0xd8, 0x5f, 0x16, 0xaa, 0x0c, 0x39, 0xe4, 0xf5, 0x7d, 0x82, 0x91, 0xbe,
        0x60, 0x4d, 0xc8, 0x23, 0x7f, 0xa5, 0x1e, 0x9c, 0x38, 0xb0, 0x6d, 0x4a, 0xf2, 0x17,
    ];
    pub const PLAINTEXT: &[u8] = b"John;892157932877159;$100";
}

/// XOR with the repeating key; encryption and decryption are the same.
pub fn xor_stream(key: &[u8], data: &[u8]) -> Vec<u8> {
    data.iter().zip(key.iter().cycle()).map(|(d, k)| d ^ k).collect()
}

/// A generated program with the facts tests need about it.
#[derive(Clone, Debug)]
pub struct GeneratedProgram {
    pub source: String,
    pub ecall_count: usize,
    /// Per ecall: number of arguments it expects.
    pub arities: Vec<usize>,
}

/// Random well-formed enclave source: 1..=16 ecalls, a dispatcher chain of
/// 1..=3 hops, bodies of straight-line arithmetic with forward branches and
/// frame-local stores, and randomly sized 00/ff free space between functions.
pub fn generate_program(seed: u64) -> GeneratedProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: u32| rng.next_u32() % n;

    let ecalls = 1 + pick(16) as usize;
    let hops = 1 + pick(3) as usize;
    let mut s = String::new();
    let _ = writeln!(s, ".entry entry");
    let mut arities = Vec::with_capacity(ecalls);
    for i in 0..ecalls {
        let argc = pick(4) as usize;
        let kinds: Vec<&str> = (0..argc).map(|_| if pick(2) == 0 { "val" } else { "ptr" }).collect();
        let _ = writeln!(s, ".ecall f{i} {}", kinds.join(" "));
        arities.push(argc);
    }

    let _ = writeln!(s, "entry:\n    CALL hop0\n    RET");
    for h in 0..hops {
        let _ = writeln!(s, "hop{h}:");
        if h + 1 == hops {
            let _ = writeln!(s, "    CALLIND r0, @ecall_table\n    RET");
        } else if pick(2) == 0 {
            let _ = writeln!(s, "    CALL hop{}\n    RET", h + 1);
        } else {
            let _ = writeln!(s, "    JMP hop{}", h + 1);
        }
    }
    // At least one chunk big enough for a small trampoline.
    let _ = writeln!(s, "    HALT\n    .freespace {} 00", 8 * (4 + pick(8)));

    for i in 0..ecalls {
        let _ = writeln!(s, "f{i}:");
        let body = pick(10) as usize;
        for k in 0..body {
            let r = 2 + pick(6);
            match pick(6) {
                0 => {
                    let _ = writeln!(s, "    LOADI r{r}, {}", rng_word(&mut pick));
                }
                1 => {
                    let _ = writeln!(s, "    ADDI r{r}, r{}, {}", 2 + pick(6), pick(1000));
                }
                2 => {
                    let _ = writeln!(s, "    XOR r{r}, r{}", 2 + pick(6));
                }
                3 => {
                    let _ = writeln!(s, "    STORE r{r}, r15, {}", 24 + 4 * pick(9));
                }
                4 => {
                    let _ = writeln!(s, "    LOAD r{r}, r15, {}", 4 * pick(15));
                }
                _ => {
                    let _ = writeln!(s, "    BRZ r{r}, f{i}_k{}", k + 1);
                }
            }
            let _ = writeln!(s, "f{i}_k{}:", k + 1);
        }
        let _ = writeln!(s, "    LOADI r0, {i}\n    RET");
        if pick(3) > 0 {
            let fill = if pick(2) == 0 { "00" } else { "ff" };
            // HALT ends in a non-zero byte, so a 00 run starts cleanly after it.
            let _ = writeln!(s, "    HALT\n    .freespace {} {fill}", 8 * (1 + pick(12)));
        }
    }
    if pick(2) == 0 {
        let _ = writeln!(s, "table_{}:\n    .rodata {:08x}", pick(100), rng_word(&mut pick));
    }
    let _ = writeln!(s, "scratch:\n    .rwdata {}", 4 * (1 + pick(8)));
    GeneratedProgram {
        source: s,
        ecall_count: ecalls,
        arities,
    }
}

fn rng_word(pick: &mut impl FnMut(u32) -> u32) -> u32 {
    (pick(1 << 16) << 16) | pick(1 << 16)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{assemble, find_free_chunks, locate_ecall_table};

    #[test]
    fn bundled_samples_assemble_and_discover() {
        for (name, src) in SAMPLES {
            let asm = assemble(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            let found = locate_ecall_table(&asm.image).unwrap();
            let expected: Vec<u32> = asm.symbols.ecalls.iter().map(|e| e.function_offset).collect();
            assert_eq!(found.functions, expected, "{name}");
        }
    }

    #[test]
    fn remote_decrypt_free_space() {
        let img = assemble(REMOTE_DECRYPT).unwrap().image;
        let usable: Vec<u32> = find_free_chunks(&img)
            .iter()
            .map(|c| c.usable_len())
            .filter(|n| *n > 0)
            .collect();
        assert_eq!(usable, [256, 160]);
        let key_at = img.rwdata();
        assert_eq!(&key_at[..32], &remote_decrypt::SESSION_KEY);
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        for seed in 0..50 {
            let a = generate_program(seed);
            assert_eq!(a.source, generate_program(seed).source);
            let asm = assemble(&a.source).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{}", a.source));
            assert_eq!(asm.symbols.ecalls.len(), a.ecall_count);
        }
    }
}
