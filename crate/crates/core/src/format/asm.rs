//! Assembler for `.seta` enclave sources.
//!
//! Line oriented. `#` starts a comment; `name:` defines a label (optionally
//! followed by an instruction or data directive on the same line).
//!
//! ```text
//! .entry <label>                      exported entry point (exactly once)
//! .ecall <label> [ptr|val ...]        adds a table entry; optional argument kinds go to META
//! .freespace <n> <00|ff>              n filler bytes in CODE (multiple of 8)
//! .rodata <hex bytes>                 bytes appended to RODATA
//! .rwdata <n> [hex bytes]             n bytes of RWDATA, optionally initialized
//! ```
//!
//! Immediates are decimal, `0x` hex, negative decimal, a label with an
//! optional `+N`/`-N` offset, or `@ecall_table`. Code labels resolve to CODE
//! offsets, data labels to absolute enclave addresses. The ecall table is
//! placed at the end of RODATA; each `.ecall` body gets the SDK wrapper
//! emitted in front of its label.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::abi::SectionMap;
use super::ecall::{encode_signatures, encode_table, wrapper, ArgKind, TABLE_PREFIX_LEN, TABLE_SENTINEL};
use super::image::{EnclaveImage, FormatError};
use super::isa::{Instruction, Opcode, INSN_LEN, REGISTER_COUNT};

/// SDK version stamped into every assembled header.
pub const SDK_VERSION: u16 = 1;
const TABLE_SYMBOL: &str = "@ecall_table";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symbol {
    Code(u32),
    Rodata(u32),
    Rwdata(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EcallSymbol {
    pub label: String,
    pub wrapper_offset: u32,
    pub function_offset: u32,
    pub signature: Option<Vec<ArgKind>>,
}

/// Ground truth emitted next to the image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolMap {
    pub labels: BTreeMap<String, Symbol>,
    pub ecalls: Vec<EcallSymbol>,
    pub table_offset: u32,
}

#[derive(Clone, Debug)]
pub struct Assembly {
    pub image: EnclaveImage,
    pub symbols: SymbolMap,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("jump target {0:#x} is outside CODE or misaligned")]
    JumpOutOfRange(u32),
    #[error("missing .entry directive")]
    MissingEntry,
    #[error("more than one .entry directive")]
    DuplicateEntry,
    #[error("no .ecall directive")]
    NoEcall,
    #[error("`{0}` named twice by .ecall")]
    DuplicateEcall(String),
    #[error("`{0}` must label code")]
    NotCode(String),
    #[error("RODATA contains the ecall table sentinel outside the table")]
    SentinelCollision,
    #[error("invalid image: {0}")]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{column}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub column: usize,
    pub kind: AsmErrorKind,
}

#[derive(Clone, Debug)]
struct Token<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let code = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in code.char_indices() {
        let sep = ch.is_whitespace() || ch == ',';
        match (sep, start) {
            (true, Some(s)) => {
                out.push(Token {
                    text: &code[s..i],
                    col: s + 1,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &code[s..],
            col: s + 1,
        });
    }
    out
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Clone, Debug)]
enum CodeItem<'a> {
    Insn {
        op: Opcode,
        operands: Vec<Token<'a>>,
        line: usize,
        col: usize,
    },
    Wrapper(u16),
    Free {
        len: u32,
        fill: u8,
    },
}

impl CodeItem<'_> {
    fn size(&self) -> u32 {
        match self {
            CodeItem::Insn { .. } => INSN_LEN as u32,
            CodeItem::Wrapper(_) => 3 * INSN_LEN as u32,
            CodeItem::Free { len, .. } => *len,
        }
    }
}

struct Ctx<'a> {
    code: Vec<CodeItem<'a>>,
    code_pos: u32,
    rodata: Vec<u8>,
    rwdata: Vec<u8>,
    labels: BTreeMap<String, Symbol>,
    pending: Vec<(String, usize, usize)>,
    ecall_index: BTreeMap<String, u16>,
    wrappers: BTreeMap<String, u32>,
}

fn err(line: usize, column: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, column, kind }
}

fn syntax(line: usize, column: usize, msg: impl Into<String>) -> AsmError {
    err(line, column, AsmErrorKind::Syntax(msg.into()))
}

fn parse_number(text: &str) -> Option<u32> {
    let (neg, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok()?
    } else if body.chars().all(|c| c.is_ascii_digit()) && !body.is_empty() {
        body.parse::<u32>().ok()?
    } else {
        return None;
    };
    Some(if neg { value.wrapping_neg() } else { value })
}

fn parse_hex_bytes(tokens: &[Token<'_>], line: usize) -> Result<Vec<u8>, AsmError> {
    let mut out = Vec::new();
    for t in tokens {
        let s = t.text;
        if s.len() % 2 != 0 || !s.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(syntax(line, t.col, format!("bad hex bytes `{s}`")));
        }
        for i in (0..s.len()).step_by(2) {
            out.push(u8::from_str_radix(&s[i..i + 2], 16).unwrap());
        }
    }
    Ok(out)
}

fn parse_register(t: &Token<'_>, line: usize) -> Result<u8, AsmError> {
    let body = t
        .text
        .strip_prefix('r')
        .or_else(|| t.text.strip_prefix('R'))
        .ok_or_else(|| syntax(line, t.col, format!("expected register, found `{}`", t.text)))?;
    match body.parse::<u8>() {
        Ok(r) if (r as usize) < REGISTER_COUNT && !body.starts_with('+') => Ok(r),
        _ => Err(syntax(line, t.col, format!("bad register `{}`", t.text))),
    }
}

/// Assembles `source`. Identical input always yields byte-identical output.
pub fn assemble(source: &str) -> Result<Assembly, AsmError> {
    let mut ctx = Ctx {
        code: Vec::new(),
        code_pos: 0,
        rodata: Vec::new(),
        rwdata: Vec::new(),
        labels: BTreeMap::new(),
        pending: Vec::new(),
        ecall_index: BTreeMap::new(),
        wrappers: BTreeMap::new(),
    };

    // Pass 1: entry and ecall declarations, so wrappers can be placed while laying out.
    let mut entry: Option<(String, usize, usize)> = None;
    let mut ecalls: Vec<(String, Option<Vec<ArgKind>>, usize, usize)> = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut toks = tokenize(raw);
        if toks.first().is_some_and(|t| t.text.ends_with(':')) {
            toks.remove(0);
        }
        let Some(head) = toks.first() else { continue };
        match head.text {
            ".entry" => {
                let [_, name] = toks.as_slice() else {
                    return Err(syntax(line, head.col, ".entry takes one label"));
                };
                if entry.is_some() {
                    return Err(err(line, head.col, AsmErrorKind::DuplicateEntry));
                }
                entry = Some((name.text.to_string(), line, name.col));
            }
            ".ecall" => {
                let Some(name) = toks.get(1) else {
                    return Err(syntax(line, head.col, ".ecall takes a label"));
                };
                if !is_ident(name.text) {
                    return Err(syntax(line, name.col, format!("bad label `{}`", name.text)));
                }
                let sig = if toks.len() > 2 {
                    let mut kinds = Vec::new();
                    for t in &toks[2..] {
                        kinds.push(match t.text {
                            "ptr" => ArgKind::Ptr,
                            "val" => ArgKind::Val,
                            other => return Err(syntax(line, t.col, format!("unknown argument kind `{other}`"))),
                        });
                    }
                    if kinds.len() > super::abi::MAX_ARGS {
                        return Err(syntax(line, toks[2].col, "at most 6 ecall arguments"));
                    }
                    Some(kinds)
                } else {
                    None
                };
                if ecalls.iter().any(|(n, ..)| n == name.text) {
                    return Err(err(line, name.col, AsmErrorKind::DuplicateEcall(name.text.to_string())));
                }
                ecalls.push((name.text.to_string(), sig, line, name.col));
            }
            _ => {}
        }
    }
    let (entry_label, entry_line, entry_col) = entry.ok_or_else(|| err(0, 0, AsmErrorKind::MissingEntry))?;
    if ecalls.is_empty() {
        return Err(err(0, 0, AsmErrorKind::NoEcall));
    }
    for (i, (name, ..)) in ecalls.iter().enumerate() {
        ctx.ecall_index.insert(name.clone(), i as u16);
    }

    // Pass 2: layout.
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut toks = tokenize(raw);
        if let Some(first) = toks.first() {
            if let Some(name) = first.text.strip_suffix(':') {
                if !is_ident(name) {
                    return Err(syntax(line, first.col, format!("bad label `{name}`")));
                }
                if ctx.labels.contains_key(name) || ctx.pending.iter().any(|(n, ..)| n == name) {
                    return Err(err(line, first.col, AsmErrorKind::DuplicateLabel(name.to_string())));
                }
                ctx.pending.push((name.to_string(), line, first.col));
                toks.remove(0);
            }
        }
        let Some(head) = toks.first().cloned() else { continue };
        match head.text {
            ".entry" | ".ecall" => {}
            ".rodata" => {
                let bytes = parse_hex_bytes(&toks[1..], line)?;
                let off = ctx.rodata.len() as u32;
                ctx.bind_pending(Symbol::Rodata(off))?;
                ctx.rodata.extend_from_slice(&bytes);
            }
            ".rwdata" => {
                let n = toks
                    .get(1)
                    .and_then(|t| parse_number(t.text))
                    .ok_or_else(|| syntax(line, head.col, ".rwdata takes a size"))?;
                let init = parse_hex_bytes(&toks[2..], line)?;
                if init.len() > n as usize {
                    return Err(syntax(line, head.col, "initializer longer than reserved size"));
                }
                let off = ctx.rwdata.len() as u32;
                ctx.bind_pending(Symbol::Rwdata(off))?;
                ctx.rwdata.extend_from_slice(&init);
                ctx.rwdata.resize(off as usize + n as usize, 0);
            }
            ".freespace" => {
                let (Some(n), Some(fill)) = (toks.get(1), toks.get(2)) else {
                    return Err(syntax(line, head.col, ".freespace takes a size and 00|ff"));
                };
                let len = parse_number(n.text)
                    .filter(|v| *v > 0 && (*v as usize).is_multiple_of(INSN_LEN))
                    .ok_or_else(|| syntax(line, n.col, "free space size must be a positive multiple of 8"))?;
                let fill = match fill.text {
                    "00" => 0x00,
                    "ff" | "FF" => 0xFF,
                    _ => return Err(syntax(line, fill.col, "fill must be 00 or ff")),
                };
                if toks.len() > 3 {
                    return Err(syntax(line, toks[3].col, "unexpected operand"));
                }
                ctx.push_code(CodeItem::Free { len, fill })?;
            }
            text if text.starts_with('.') => {
                return Err(syntax(line, head.col, format!("unknown directive `{text}`")));
            }
            text => {
                let op = Opcode::from_mnemonic(text)
                    .ok_or_else(|| syntax(line, head.col, format!("unknown mnemonic `{text}`")))?;
                ctx.push_code(CodeItem::Insn {
                    op,
                    operands: toks[1..].to_vec(),
                    line,
                    col: head.col,
                })?;
            }
        }
    }
    // Trailing labels point at the end of CODE.
    let end = ctx.code_pos;
    ctx.bind_pending(Symbol::Code(end))?;

    // Ecall table goes at the end of RODATA, entries 4-byte aligned.
    let mut entries = Vec::with_capacity(ecalls.len());
    for (name, _, line, col) in &ecalls {
        match ctx.wrappers.get(name) {
            Some(w) => entries.push(*w),
            None => {
                return Err(match ctx.labels.get(name) {
                    Some(_) => err(*line, *col, AsmErrorKind::NotCode(name.clone())),
                    None => err(*line, *col, AsmErrorKind::UndefinedLabel(name.clone())),
                })
            }
        }
    }
    while !(ctx.rodata.len() as u32 + TABLE_PREFIX_LEN).is_multiple_of(4) {
        ctx.rodata.push(0);
    }
    let table_offset = ctx.rodata.len() as u32 + TABLE_PREFIX_LEN;
    ctx.rodata.extend_from_slice(&encode_table(&entries));
    let sentinel_hits = ctx
        .rodata
        .windows(TABLE_SENTINEL.len())
        .filter(|w| *w == TABLE_SENTINEL)
        .count();
    if sentinel_hits != 1 {
        return Err(err(0, 0, AsmErrorKind::SentinelCollision));
    }

    // Pass 3: encode.
    let code_len = ctx.code_pos;
    let map = SectionMap::new(code_len, ctx.rodata.len() as u32, ctx.rwdata.len() as u32);
    let resolver = Resolver {
        labels: &ctx.labels,
        map,
        code_len,
        table_offset,
    };
    let mut code = Vec::with_capacity(code_len as usize);
    for item in &ctx.code {
        match item {
            CodeItem::Wrapper(index) => {
                for insn in wrapper(*index) {
                    code.extend_from_slice(&insn.encode());
                }
            }
            CodeItem::Free { len, fill } => code.resize(code.len() + *len as usize, *fill),
            CodeItem::Insn {
                op,
                operands,
                line,
                col,
            } => {
                let insn = resolver.encode(*op, operands, *line, *col)?;
                code.extend_from_slice(&insn.encode());
            }
        }
    }

    let entry_offset = match ctx.labels.get(&entry_label) {
        Some(Symbol::Code(off)) if *off < code_len => *off,
        Some(_) => return Err(err(entry_line, entry_col, AsmErrorKind::NotCode(entry_label))),
        None => return Err(err(entry_line, entry_col, AsmErrorKind::UndefinedLabel(entry_label))),
    };

    let sigs: Vec<Option<Vec<ArgKind>>> = ecalls.iter().map(|(_, s, ..)| s.clone()).collect();
    let meta = encode_signatures(&sigs);
    let image = EnclaveImage::new(SDK_VERSION, entry_offset, code, ctx.rodata, ctx.rwdata, meta)
        .map_err(|e| err(0, 0, e.into()))?;

    let ecall_symbols = ecalls
        .into_iter()
        .map(|(label, signature, ..)| {
            let wrapper_offset = ctx.wrappers[&label];
            let function_offset = match ctx.labels[&label] {
                Symbol::Code(off) => off,
                _ => unreachable!("wrapper implies code label"),
            };
            EcallSymbol {
                label,
                wrapper_offset,
                function_offset,
                signature,
            }
        })
        .collect();

    Ok(Assembly {
        image,
        symbols: SymbolMap {
            labels: ctx.labels,
            ecalls: ecall_symbols,
            table_offset,
        },
    })
}

impl<'a> Ctx<'a> {
    fn bind_pending(&mut self, sym: Symbol) -> Result<(), AsmError> {
        for (name, _, _) in core::mem::take(&mut self.pending) {
            self.labels.insert(name, sym);
        }
        Ok(())
    }

    fn push_code(&mut self, item: CodeItem<'a>) -> Result<(), AsmError> {
        let ecall = self
            .pending
            .iter()
            .find_map(|(n, ..)| self.ecall_index.get(n).map(|i| (n.clone(), *i)));
        if let Some((name, index)) = ecall {
            self.wrappers.insert(name, self.code_pos);
            self.code.push(CodeItem::Wrapper(index));
            self.code_pos += 3 * INSN_LEN as u32;
        }
        let here = self.code_pos;
        self.bind_pending(Symbol::Code(here))?;
        self.code_pos += item.size();
        self.code.push(item);
        Ok(())
    }
}

struct Resolver<'a> {
    labels: &'a BTreeMap<String, Symbol>,
    map: SectionMap,
    code_len: u32,
    table_offset: u32,
}

impl Resolver<'_> {
    fn imm(&self, t: &Token<'_>, line: usize) -> Result<(u32, bool), AsmError> {
        if let Some(v) = parse_number(t.text) {
            return Ok((v, false));
        }
        let (name, delta) = match t.text.find(['+', '-']) {
            Some(i) if i > 0 => {
                let d = parse_number(t.text[i..].trim_start_matches('+'))
                    .filter(|_| t.text[i + 1..].chars().all(|c| c.is_ascii_alphanumeric()))
                    .ok_or_else(|| syntax(line, t.col, format!("bad offset in `{}`", t.text)))?;
                (&t.text[..i], d)
            }
            _ => (t.text, 0),
        };
        if name == TABLE_SYMBOL {
            return Ok((self.table_offset.wrapping_add(delta), false));
        }
        if !is_ident(name) {
            return Err(syntax(line, t.col, format!("bad operand `{}`", t.text)));
        }
        let base = match self.labels.get(name) {
            Some(Symbol::Code(off)) => return Ok((off.wrapping_add(delta), true)),
            Some(Symbol::Rodata(off)) => self.map.rodata + off,
            Some(Symbol::Rwdata(off)) => self.map.rwdata + off,
            None => return Err(err(line, t.col, AsmErrorKind::UndefinedLabel(name.to_string()))),
        };
        Ok((base.wrapping_add(delta), false))
    }

    fn target(&self, t: &Token<'_>, line: usize) -> Result<u32, AsmError> {
        let (v, _) = self.imm(t, line)?;
        if v >= self.code_len || !(v as usize).is_multiple_of(INSN_LEN) {
            return Err(err(line, t.col, AsmErrorKind::JumpOutOfRange(v)));
        }
        Ok(v)
    }

    fn encode(&self, op: Opcode, ops: &[Token<'_>], line: usize, col: usize) -> Result<Instruction, AsmError> {
        let want = |n: usize| -> Result<(), AsmError> {
            if ops.len() == n {
                Ok(())
            } else {
                Err(syntax(
                    line,
                    ops.get(n).map_or(col, |t| t.col),
                    format!("{} takes {n} operand(s), found {}", op.mnemonic(), ops.len()),
                ))
            }
        };
        let reg = |i: usize| parse_register(&ops[i], line);
        Ok(match op {
            Opcode::Halt => {
                want(0)?;
                Instruction::halt()
            }
            Opcode::Ret => {
                want(0)?;
                Instruction::ret()
            }
            Opcode::Loadi => {
                want(2)?;
                Instruction::loadi(reg(0)?, self.imm(&ops[1], line)?.0)
            }
            Opcode::Load | Opcode::Store | Opcode::Addi | Opcode::IsOut | Opcode::Cmpb => {
                want(3)?;
                let imm = self.imm(&ops[2], line)?.0;
                if op == Opcode::Cmpb && imm > 0xFF {
                    return Err(syntax(line, ops[2].col, "CMPB compares against a byte"));
                }
                Instruction::new(op, reg(0)?, reg(1)? as u16, imm)
            }
            Opcode::Call | Opcode::Jmp => {
                want(1)?;
                Instruction::new(op, 0, 0, self.target(&ops[0], line)?)
            }
            Opcode::Brz => {
                want(2)?;
                Instruction::brz(reg(0)?, self.target(&ops[1], line)?)
            }
            Opcode::CallInd => {
                want(2)?;
                Instruction::call_ind(reg(0)?, self.imm(&ops[1], line)?.0)
            }
            Opcode::Copy => {
                want(3)?;
                Instruction::copy(reg(0)?, reg(1)?, reg(2)?)
            }
            Opcode::Xor => {
                want(2)?;
                Instruction::xor(reg(0)?, reg(1)?)
            }
        })
    }
}
