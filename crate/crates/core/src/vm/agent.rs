//! The untrusted agent and the fixed-quantum schedule that interleaves it with
//! enclave execution.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use super::{Completion, EcallRequest, Fault, Step, VmError, VmState, QUANTUM};
use crate::format::isa::REGISTER_COUNT;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AgentAction {
    /// Blocks until `marker` appears at `addr`.
    WaitForMarker {
        addr: u32,
        marker: [u8; 4],
    },
    Read {
        addr: u32,
        len: u32,
    },
    WriteFlag {
        addr: u32,
        value: u8,
    },
    Record(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UntrustedAgent {
    pub script: Vec<AgentAction>,
}

impl UntrustedAgent {
    pub fn new(script: Vec<AgentAction>) -> Self {
        UntrustedAgent { script }
    }

    /// Waits for the marker, reads `len` bytes at `addr`, then sets the flag byte.
    pub fn leak_reader(addr: u32, len: u32, flag_addr: u32) -> Self {
        UntrustedAgent::new(alloc::vec![
            AgentAction::WaitForMarker {
                addr,
                marker: crate::attack::MARKER,
            },
            AgentAction::Read { addr, len },
            AgentAction::WriteFlag {
                addr: flag_addr,
                value: 1,
            },
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TranscriptEvent {
    MarkerSeen { step: u64, addr: u32 },
    Read { step: u64, addr: u32, bytes: Vec<u8> },
    FlagWritten { step: u64, addr: u32, value: u8 },
    Record { step: u64, label: String },
}

/// Machine state captured when execution reached a watched pc.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub pc: u32,
    pub step: u64,
    pub regs: [u32; REGISTER_COUNT],
    pub frame_base: u32,
    /// The 64-byte ecall frame at `frame_base`.
    pub frame: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed(Completion),
    Failed(VmError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub events: Vec<TranscriptEvent>,
    pub outcome: Outcome,
    pub steps: u64,
    /// Untrusted range after the run.
    pub untrusted: Vec<u8>,
    pub untrusted_base: u32,
    pub snapshots: Vec<Snapshot>,
    pub out_buffers: Vec<(u32, u32)>,
}

impl Transcript {
    pub fn result(&self) -> Result<Completion, VmError> {
        match &self.outcome {
            Outcome::Completed(c) => Ok(*c),
            Outcome::Failed(e) => Err(e.clone()),
        }
    }

    pub fn reads(&self) -> impl Iterator<Item = (u32, &[u8])> {
        self.events.iter().filter_map(|e| match e {
            TranscriptEvent::Read { addr, bytes, .. } => Some((*addr, bytes.as_slice())),
            _ => None,
        })
    }

    pub fn untrusted_bytes(&self, addr: u32, len: u32) -> Option<&[u8]> {
        let off = addr.checked_sub(self.untrusted_base)? as usize;
        self.untrusted.get(off..off + len as usize)
    }

    /// Text report: events, outcome, and hexdumps of the out-buffers.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            match e {
                TranscriptEvent::MarkerSeen { step, addr } => {
                    let _ = writeln!(s, "[step {step:>7}] agent: marker seen at {addr:#010x}");
                }
                TranscriptEvent::Read { step, addr, bytes } => {
                    let _ = writeln!(s, "[step {step:>7}] agent: read {} bytes at {addr:#010x}", bytes.len());
                    s.push_str(&hexdump(*addr, bytes));
                }
                TranscriptEvent::FlagWritten { step, addr, value } => {
                    let _ = writeln!(s, "[step {step:>7}] agent: wrote flag {value} at {addr:#010x}");
                }
                TranscriptEvent::Record { step, label } => {
                    let _ = writeln!(s, "[step {step:>7}] agent: {label}");
                }
            }
        }
        match &self.outcome {
            Outcome::Completed(c) => {
                let _ = writeln!(s, "ecall completed: r0={:#x}, {} steps", c.return_value, c.steps);
            }
            Outcome::Failed(e) => {
                let _ = writeln!(s, "ecall failed: {e}");
            }
        }
        for (addr, len) in &self.out_buffers {
            if let Some(bytes) = self.untrusted_bytes(*addr, *len) {
                let _ = writeln!(s, "out-buffer {addr:#010x} after run:");
                s.push_str(&hexdump(*addr, bytes));
            }
        }
        s
    }
}

/// 16 bytes per row, prefixed with the address, ASCII column on the right.
pub fn hexdump(base: u32, bytes: &[u8]) -> String {
    let mut s = String::new();
    for (row, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(s, "{:08x}  ", base as usize + row * 16);
        for i in 0..16 {
            match chunk.get(i) {
                Some(b) => {
                    let _ = write!(s, "{b:02x} ");
                }
                None => s.push_str("   "),
            }
            if i == 7 {
                s.push(' ');
            }
        }
        s.push_str(" |");
        for b in chunk {
            s.push(if b.is_ascii_graphic() || *b == b' ' {
                *b as char
            } else {
                '.'
            });
        }
        s.push_str("|\n");
    }
    s
}

enum Turn {
    Acted,
    Idle,
}

struct Agent {
    queue: VecDeque<AgentAction>,
    events: Vec<TranscriptEvent>,
}

impl Agent {
    fn turn(&mut self, vm: &mut VmState) -> Result<Turn, Fault> {
        let step = vm.steps_executed;
        let Some(action) = self.queue.front() else {
            return Ok(Turn::Idle);
        };
        match action {
            AgentAction::WaitForMarker { addr, marker } => {
                if vm.read_untrusted(*addr, 4)? != marker {
                    return Ok(Turn::Idle);
                }
                self.events.push(TranscriptEvent::MarkerSeen { step, addr: *addr });
            }
            AgentAction::Read { addr, len } => {
                let bytes = vm.read_untrusted(*addr, *len)?.to_vec();
                self.events.push(TranscriptEvent::Read {
                    step,
                    addr: *addr,
                    bytes,
                });
            }
            AgentAction::WriteFlag { addr, value } => {
                vm.write_untrusted(*addr, &[*value])?;
                self.events.push(TranscriptEvent::FlagWritten {
                    step,
                    addr: *addr,
                    value: *value,
                });
            }
            AgentAction::Record(label) => self.events.push(TranscriptEvent::Record {
                step,
                label: label.clone(),
            }),
        }
        self.queue.pop_front();
        Ok(Turn::Acted)
    }
}

/// Runs an ecall with the agent interleaved: `QUANTUM` instructions, then one
/// ready agent action, repeated. After the ecall returns the agent finishes
/// whatever is still ready.
pub fn run_with_agent(
    vm: &mut VmState,
    request: EcallRequest<'_>,
    agent: &UntrustedAgent,
    step_budget: u64,
) -> Transcript {
    let mut a = Agent {
        queue: agent.script.iter().cloned().collect(),
        events: Vec::new(),
    };
    let outcome = schedule(vm, request, &mut a, step_budget.max(1));
    Transcript {
        events: a.events,
        outcome,
        steps: vm.steps_executed,
        untrusted: vm.untrusted_memory().to_vec(),
        untrusted_base: vm.layout.untrusted_base,
        snapshots: vm.snapshots().to_vec(),
        out_buffers: vm.layout.out_buffers.clone(),
    }
}

fn schedule(vm: &mut VmState, request: EcallRequest<'_>, agent: &mut Agent, budget: u64) -> Outcome {
    if let Err(e) = vm.enter(request) {
        return Outcome::Failed(e);
    }
    let completion = loop {
        let mut done = None;
        for _ in 0..QUANTUM {
            if vm.steps_executed >= budget {
                break;
            }
            match vm.step() {
                Ok(Step::Running) => {}
                Ok(Step::Done(c)) => {
                    done = Some(c);
                    break;
                }
                Err(f) => return Outcome::Failed(VmError::Fault(f)),
            }
        }
        if let Some(c) = done {
            break c;
        }
        let turn = match agent.turn(vm) {
            Ok(t) => t,
            Err(f) => return Outcome::Failed(VmError::Fault(f)),
        };
        if vm.steps_executed >= budget {
            return Outcome::Failed(match turn {
                Turn::Idle => VmError::Deadlock(vm.steps_executed),
                Turn::Acted => VmError::BudgetExceeded(budget),
            });
        }
    };
    loop {
        match agent.turn(vm) {
            Ok(Turn::Acted) => {}
            Ok(Turn::Idle) => break,
            Err(f) => return Outcome::Failed(VmError::Fault(f)),
        }
    }
    Outcome::Completed(completion)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hexdump_rows() {
        let d = hexdump(0x1000, b"MALW0123456789abcdefXY");
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("00001000  4d 41 4c 57"));
        assert!(lines[0].ends_with("|MALW0123456789ab|"));
        assert!(lines[1].starts_with("00001010  63 64"));
    }
}
