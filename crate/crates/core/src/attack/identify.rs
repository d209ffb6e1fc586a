//! Picking the signer out of a process listing.

use alloc::string::String;
use alloc::vec::Vec;

/// What the malware can observe about a running process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessDescriptor {
    pub name: String,
    pub argv: Vec<String>,
    pub memory_bytes: u64,
    pub code_hash: [u8; 32],
    pub signer_cert_id: Option<String>,
}

/// Enabled heuristics; a descriptor must satisfy every one that is set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SignerHeuristics {
    /// `*` and `?` wildcards.
    pub name_glob: Option<String>,
    /// Must appear in at least one argument.
    pub argv_substring: Option<String>,
    /// Inclusive bounds.
    pub memory_range: Option<(u64, u64)>,
    pub code_hash: Option<[u8; 32]>,
    pub cert_id: Option<String>,
}

impl SignerHeuristics {
    pub fn matches(&self, p: &ProcessDescriptor) -> bool {
        self.name_glob.as_deref().is_none_or(|g| glob_match(g, &p.name))
            && self
                .argv_substring
                .as_deref()
                .is_none_or(|s| p.argv.iter().any(|a| a.contains(s)))
            && self
                .memory_range
                .is_none_or(|(lo, hi)| lo <= p.memory_bytes && p.memory_bytes <= hi)
            && self.code_hash.is_none_or(|h| h == p.code_hash)
            && self
                .cert_id
                .as_deref()
                .is_none_or(|c| p.signer_cert_id.as_deref() == Some(c))
    }
}

/// Index of the first process matching all enabled heuristics.
pub fn identify_signer(processes: &[ProcessDescriptor], heuristics: &SignerHeuristics) -> Option<usize> {
    processes.iter().position(|p| heuristics.matches(p))
}

/// Shell-style wildcard match over characters.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|c| *c == '*')
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn proc(name: &str, hash: u8) -> ProcessDescriptor {
        ProcessDescriptor {
            name: name.to_string(),
            argv: vec!["sign".to_string(), "-enclave".to_string(), "app.so".to_string()],
            memory_bytes: 4 << 20,
            code_hash: [hash; 32],
            signer_cert_id: None,
        }
    }

    #[test]
    fn glob() {
        assert!(glob_match("sgx_sign*", "sgx_sign.exe"));
        assert!(glob_match("*sign", "sgx_sign"));
        assert!(glob_match("s?x_*", "sgx_sign"));
        assert!(!glob_match("sgx_sign", "sgx_signer"));
        assert!(glob_match("*", ""));
        assert!(!glob_match("?", ""));
    }

    #[test]
    fn matches_named_signer_with_hash() {
        let list = vec![proc("explorer", 1), proc("sgx_sign", 7)];
        let h = SignerHeuristics {
            name_glob: Some("sgx_sign*".to_string()),
            code_hash: Some([7; 32]),
            ..Default::default()
        };
        assert_eq!(identify_signer(&list, &h), Some(1));
        assert_eq!(identify_signer(&[], &h), None);
    }

    #[test]
    fn every_enabled_heuristic_must_hold() {
        let mut p = proc("sgx_sign", 7);
        p.signer_cert_id = Some("intel-sdk".to_string());
        let h = SignerHeuristics {
            argv_substring: Some("-enclave".to_string()),
            memory_range: Some((1 << 20, 8 << 20)),
            cert_id: Some("intel-sdk".to_string()),
            ..Default::default()
        };
        assert!(h.matches(&p));
        p.memory_bytes = 64 << 20;
        assert!(!h.matches(&p));
    }
}
