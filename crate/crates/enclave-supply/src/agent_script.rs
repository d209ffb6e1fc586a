//! Text form of an untrusted-agent script, one action per line:
//!
//! ```text
//! # comment
//! wait  0x1000 MALW
//! read  0x1000 36
//! flag  0x1030 1
//! note  leak collected
//! ```

use enclave_supply_core::vm::{AgentAction, UntrustedAgent};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("agent script line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

pub fn parse_number(s: &str) -> Option<u32> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

pub fn parse_agent_script(text: &str) -> Result<UntrustedAgent, ScriptError> {
    let mut script = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |msg: &str| ScriptError {
            line: i + 1,
            msg: msg.into(),
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let verb = parts.next().unwrap();
        let mut num = |what: &str| {
            parts
                .next()
                .and_then(parse_number)
                .ok_or_else(|| err(&format!("expected {what}")))
        };
        let action = match verb {
            "wait" => {
                let addr = num("address")?;
                let m = line.split_whitespace().nth(2).unwrap_or("MALW").as_bytes();
                let marker: [u8; 4] = m.try_into().map_err(|_| err("marker must be 4 bytes"))?;
                AgentAction::WaitForMarker { addr, marker }
            }
            "read" => AgentAction::Read {
                addr: num("address")?,
                len: num("length")?,
            },
            "flag" => {
                let addr = num("address")?;
                let value = num("value")?;
                AgentAction::WriteFlag {
                    addr,
                    value: u8::try_from(value).map_err(|_| err("flag value must fit a byte"))?,
                }
            }
            "note" => AgentAction::Record(line[4..].trim().into()),
            other => return Err(err(&format!("unknown action {other:?}"))),
        };
        script.push(action);
    }
    Ok(UntrustedAgent::new(script))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_actions() {
        let a = parse_agent_script("# leak\nwait 0x1000 MALW\nread 0x1000 36\nflag 4144 1\nnote done here\n").unwrap();
        assert_eq!(
            a.script,
            vec![
                AgentAction::WaitForMarker {
                    addr: 0x1000,
                    marker: *b"MALW"
                },
                AgentAction::Read { addr: 0x1000, len: 36 },
                AgentAction::WriteFlag { addr: 4144, value: 1 },
                AgentAction::Record("done here".into()),
            ]
        );
    }

    #[test]
    fn reports_line_numbers() {
        assert_eq!(parse_agent_script("\nread x").unwrap_err().line, 2);
        assert!(parse_agent_script("flag 1 300").is_err());
        assert!(parse_agent_script("jump 1").is_err());
    }
}
