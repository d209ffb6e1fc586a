//! Majority-arbitration build contract on a simulated hash-chained ledger.
//!
//! Every mutating call is checked against the caller, appended to `tx_log`,
//! and can be replayed from genesis to reproduce the state exactly.

mod gas;
mod round;

pub use gas::{
    fiat_cents, format_cents, gas_and_fiat_report, pack_blocks, pack_gas, BlockReport, CostReport, CostRow, GasModel,
    PackError,
};
pub use round::{
    fetch_majority_material, finish_epoch, run_build_round, BuilderNode, FetchError, FetchReport, FetchSkip,
    MaterialServer, NodeResult, RoundError, RoundOutcome, SignerFacility,
};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_TIMEOUT_SECONDS: u64 = 100;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccountId(pub [u8; 20]);

impl AccountId {
    /// Deterministic account for builder node `i`.
    pub fn for_node(i: u32) -> Self {
        let h = Sha256::new()
            .chain_update(b"builder-node")
            .chain_update(i.to_le_bytes())
            .finalize();
        AccountId(h[..20].try_into().unwrap())
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("0x")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountId({self})")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubmissionMode {
    /// Full 64-byte signing material on chain.
    FullMaterial,
    /// Only the 32-byte measurement.
    HashOnly,
}

impl SubmissionMode {
    pub fn payload_len(self) -> usize {
        match self {
            SubmissionMode::FullMaterial => 64,
            SubmissionMode::HashOnly => 32,
        }
    }

    /// Tally key for a payload.
    pub fn key(self, payload: &[u8]) -> [u8; 32] {
        match self {
            SubmissionMode::FullMaterial => Sha256::digest(payload).into(),
            SubmissionMode::HashOnly => payload.try_into().expect("length checked"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractConfig {
    pub mode: SubmissionMode,
    pub gas: GasModel,
    pub timeout_seconds: u64,
    /// Minimum submissions for a timeout decision; `None` means half the
    /// expected count, rounded up.
    pub quorum: Option<u32>,
}

impl ContractConfig {
    pub fn new(mode: SubmissionMode) -> Self {
        ContractConfig {
            mode,
            gas: GasModel::default(),
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            quorum: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub account: AccountId,
    pub payload: Vec<u8>,
    pub gas_charged: u64,
    pub block_index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub epoch: u64,
    pub winning_hash: Option<[u8; 32]>,
    pub winner_accounts: BTreeSet<AccountId>,
    pub loser_accounts: BTreeSet<AccountId>,
    pub strict_majority: bool,
    /// Reached through the timeout path rather than the last submission.
    pub by_timeout: bool,
}

impl Decision {
    pub fn failed(&self) -> bool {
        !self.strict_majority
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TxKind {
    Init {
        accounts: Vec<AccountId>,
        config: ContractConfig,
    },
    Submit {
        account: AccountId,
        payload: Vec<u8>,
    },
    BlacklistLosers {
        caller: AccountId,
    },
    AdvanceEpoch {
        caller: AccountId,
    },
    Timeout {
        caller: AccountId,
        elapsed_seconds: u64,
    },
}

/// One ledger entry. `hash = SHA-256(prev_hash || body)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub seq: u64,
    pub epoch: u64,
    pub block_index: u32,
    pub gas: u64,
    pub kind: TxKind,
    pub prev_hash: [u8; 32],
    pub hash: [u8; 32],
}

impl TxRecord {
    fn body(seq: u64, epoch: u64, block_index: u32, gas: u64, kind: &TxKind) -> Vec<u8> {
        postcard::to_allocvec(&(seq, epoch, block_index, gas, kind)).expect("in-memory encoding")
    }

    fn compute_hash(&self) -> [u8; 32] {
        Sha256::new()
            .chain_update(self.prev_hash)
            .chain_update(Self::body(self.seq, self.epoch, self.block_index, self.gas, &self.kind))
            .finalize()
            .into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        postcard::to_allocvec(self).expect("in-memory encoding")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        postcard::from_bytes(bytes).map_err(|_| LedgerError::Malformed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("log record does not decode")]
    Malformed,
    #[error("hash chain broken at record {0}")]
    BrokenChain(usize),
    #[error("log does not start with an init record")]
    NoGenesis,
    #[error("replaying record {0} did not reproduce it")]
    Divergence(usize),
}

/// Checks sequence numbers and the hash chain from genesis.
pub fn verify_chain(log: &[TxRecord]) -> Result<(), LedgerError> {
    let mut prev = [0u8; 32];
    for (i, rec) in log.iter().enumerate() {
        if rec.seq != i as u64 || rec.prev_hash != prev || rec.compute_hash() != rec.hash {
            return Err(LedgerError::BrokenChain(i));
        }
        prev = rec.hash;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContractError {
    #[error("account list is empty")]
    NoAccounts,
    #[error("account {0} listed twice")]
    DuplicateAccount(AccountId),
    #[error("account {0} is not registered")]
    UnknownAccount(AccountId),
    #[error("account {0} is blacklisted")]
    Blacklisted(AccountId),
    #[error("account {0} already submitted this epoch")]
    DoubleSubmission(AccountId),
    #[error("payload is {got} bytes, mode expects {expected}")]
    WrongPayloadLength { expected: usize, got: usize },
    #[error("epoch already decided")]
    AlreadyDecided,
    #[error("not all submissions are in")]
    NotReady,
    #[error("no decision for this epoch")]
    NoDecision,
    #[error("epoch failed: no strict majority")]
    EpochFailed,
    #[error("timeout not reached ({elapsed}s of {timeout}s)")]
    TooEarly { elapsed: u64, timeout: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractState {
    pub config: ContractConfig,
    pub registered_accounts: BTreeSet<AccountId>,
    pub epoch: u64,
    pub submissions: BTreeMap<AccountId, SubmissionRecord>,
    pub tallies: BTreeMap<[u8; 32], u32>,
    /// Payloads kept in contract storage, by tally key.
    pub storage: BTreeMap<[u8; 32], Vec<u8>>,
    pub decision: Option<Decision>,
    pub blacklist: BTreeSet<AccountId>,
    pub block_index: u32,
    pub block_gas_used: u64,
    pub tx_log: Vec<TxRecord>,
}

impl ContractState {
    pub fn mode(&self) -> SubmissionMode {
        self.config.mode
    }

    /// Accounts expected to submit this epoch.
    pub fn expected_accounts(&self) -> BTreeSet<AccountId> {
        self.registered_accounts.difference(&self.blacklist).copied().collect()
    }

    pub fn expected_count(&self) -> usize {
        self.registered_accounts.len() - self.blacklist.len()
    }

    /// Canonical encoding; two states are equal iff these bytes are.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        postcard::to_allocvec(self).expect("in-memory encoding")
    }

    /// Records of the given epoch.
    pub fn epoch_log(&self, epoch: u64) -> impl Iterator<Item = &TxRecord> {
        self.tx_log.iter().filter(move |r| r.epoch == epoch)
    }

    fn append(&mut self, kind: TxKind, gas: u64) -> TxRecord {
        if gas > 0 && self.block_gas_used + gas > self.config.gas.block_gas_limit {
            self.block_index += 1;
            self.block_gas_used = 0;
        }
        self.block_gas_used += gas;
        let seq = self.tx_log.len() as u64;
        let prev_hash = self.tx_log.last().map_or([0; 32], |r| r.hash);
        let mut rec = TxRecord {
            seq,
            epoch: self.epoch,
            block_index: self.block_index,
            gas,
            kind,
            prev_hash,
            hash: [0; 32],
        };
        rec.hash = rec.compute_hash();
        self.tx_log.push(rec.clone());
        rec
    }

    fn check_caller(&self, caller: &AccountId) -> Result<(), ContractError> {
        if !self.registered_accounts.contains(caller) {
            return Err(ContractError::UnknownAccount(*caller));
        }
        if self.blacklist.contains(caller) {
            return Err(ContractError::Blacklisted(*caller));
        }
        Ok(())
    }
}

/// Creates the contract with its builder accounts. Epoch starts at 1.
pub fn contract_init(accounts: &[AccountId], config: ContractConfig) -> Result<ContractState, ContractError> {
    if accounts.is_empty() {
        return Err(ContractError::NoAccounts);
    }
    let mut set = BTreeSet::new();
    for a in accounts {
        if !set.insert(*a) {
            return Err(ContractError::DuplicateAccount(*a));
        }
    }
    let mut state = ContractState {
        config: config.clone(),
        registered_accounts: set,
        epoch: 1,
        submissions: BTreeMap::new(),
        tallies: BTreeMap::new(),
        storage: BTreeMap::new(),
        decision: None,
        blacklist: BTreeSet::new(),
        block_index: 0,
        block_gas_used: 0,
        tx_log: Vec::new(),
    };
    state.append(
        TxKind::Init {
            accounts: accounts.to_vec(),
            config,
        },
        0,
    );
    Ok(state)
}

/// One submission per account per epoch. The first store of a payload value
/// in an epoch pays the higher rate. The last outstanding submission
/// triggers the decision.
pub fn submit(state: &mut ContractState, account: AccountId, payload: &[u8]) -> Result<TxRecord, ContractError> {
    state.check_caller(&account)?;
    if state.decision.is_some() {
        return Err(ContractError::AlreadyDecided);
    }
    if state.submissions.contains_key(&account) {
        return Err(ContractError::DoubleSubmission(account));
    }
    let mode = state.mode();
    if payload.len() != mode.payload_len() {
        return Err(ContractError::WrongPayloadLength {
            expected: mode.payload_len(),
            got: payload.len(),
        });
    }
    let key = mode.key(payload);
    let first = !state.storage.contains_key(&key);
    let gas = state.config.gas.submission_gas(mode, first);
    let rec = state.append(
        TxKind::Submit {
            account,
            payload: payload.to_vec(),
        },
        gas,
    );
    if first {
        state.storage.insert(key, payload.to_vec());
    }
    *state.tallies.entry(key).or_insert(0) += 1;
    state.submissions.insert(
        account,
        SubmissionRecord {
            account,
            payload: payload.to_vec(),
            gas_charged: gas,
            block_index: rec.block_index,
        },
    );
    if state.submissions.len() == state.expected_count() {
        state.decision = Some(decide(state, false));
    }
    Ok(rec)
}

fn decide(state: &ContractState, by_timeout: bool) -> Decision {
    let mode = state.mode();
    let n = state.submissions.len() as u32;
    let max = state.tallies.values().copied().max().unwrap_or(0);
    let leaders: Vec<[u8; 32]> = state
        .tallies
        .iter()
        .filter(|(_, c)| **c == max)
        .map(|(k, _)| *k)
        .collect();
    let strict = leaders.len() == 1 && max > n / 2;
    let winning_hash = if strict { Some(leaders[0]) } else { None };

    let mut winners = BTreeSet::new();
    let mut losers = BTreeSet::new();
    for (acct, sub) in &state.submissions {
        let key = mode.key(&sub.payload);
        if Some(key) == winning_hash {
            winners.insert(*acct);
        } else if state.tallies[&key] < max {
            losers.insert(*acct);
        }
    }
    if by_timeout {
        for acct in state.expected_accounts() {
            if !state.submissions.contains_key(&acct) {
                losers.insert(acct);
            }
        }
    }
    Decision {
        epoch: state.epoch,
        winning_hash,
        winner_accounts: winners,
        loser_accounts: losers,
        strict_majority: strict,
        by_timeout,
    }
}

/// The decision, once every expected submission is in.
pub fn decide_majority(state: &ContractState) -> Result<Decision, ContractError> {
    match &state.decision {
        Some(d) => Ok(d.clone()),
        None if state.submissions.len() == state.expected_count() => Ok(decide(state, false)),
        None => Err(ContractError::NotReady),
    }
}

/// Closes an epoch whose deadline has passed. Missing nodes count as losers;
/// below quorum the epoch fails.
pub fn close_on_timeout(
    state: &mut ContractState,
    caller: AccountId,
    elapsed_seconds: u64,
) -> Result<Decision, ContractError> {
    state.check_caller(&caller)?;
    if state.decision.is_some() {
        return Err(ContractError::AlreadyDecided);
    }
    if elapsed_seconds < state.config.timeout_seconds {
        return Err(ContractError::TooEarly {
            elapsed: elapsed_seconds,
            timeout: state.config.timeout_seconds,
        });
    }
    state.append(
        TxKind::Timeout {
            caller,
            elapsed_seconds,
        },
        0,
    );
    let quorum = state
        .config
        .quorum
        .unwrap_or((state.expected_count() as u32).div_ceil(2)) as usize;
    let mut d = decide(state, true);
    if state.submissions.len() < quorum {
        d.winning_hash = None;
        d.strict_majority = false;
        d.winner_accounts.clear();
    }
    state.decision = Some(d.clone());
    Ok(d)
}

/// Adds the decided epoch's losers to the blacklist.
pub fn blacklist_losers(state: &mut ContractState, caller: AccountId) -> Result<BTreeSet<AccountId>, ContractError> {
    state.check_caller(&caller)?;
    let d = state.decision.as_ref().ok_or(ContractError::NoDecision)?;
    if !d.strict_majority {
        return Err(ContractError::EpochFailed);
    }
    let losers = d.loser_accounts.clone();
    state.append(TxKind::BlacklistLosers { caller }, 0);
    state.blacklist.extend(losers.iter().copied());
    Ok(losers)
}

/// Starts the next epoch once the current one is decided (or failed).
pub fn advance_epoch(state: &mut ContractState, caller: AccountId) -> Result<u64, ContractError> {
    state.check_caller(&caller)?;
    if state.decision.is_none() {
        return Err(ContractError::NotReady);
    }
    state.append(TxKind::AdvanceEpoch { caller }, 0);
    state.epoch += 1;
    state.submissions.clear();
    state.tallies.clear();
    state.storage.clear();
    state.decision = None;
    Ok(state.epoch)
}

/// Rebuilds a state from its log and checks that every record is reproduced.
pub fn replay(log: &[TxRecord]) -> Result<ContractState, LedgerError> {
    verify_chain(log)?;
    let Some(TxRecord {
        kind: TxKind::Init { accounts, config },
        ..
    }) = log.first()
    else {
        return Err(LedgerError::NoGenesis);
    };
    let mut state = contract_init(accounts, config.clone()).map_err(|_| LedgerError::Divergence(0))?;
    for (i, rec) in log.iter().enumerate().skip(1) {
        let ok = match &rec.kind {
            TxKind::Init { .. } => false,
            TxKind::Submit { account, payload } => submit(&mut state, *account, payload).is_ok(),
            TxKind::BlacklistLosers { caller } => blacklist_losers(&mut state, *caller).is_ok(),
            TxKind::AdvanceEpoch { caller } => advance_epoch(&mut state, *caller).is_ok(),
            TxKind::Timeout {
                caller,
                elapsed_seconds,
            } => close_on_timeout(&mut state, *caller, *elapsed_seconds).is_ok(),
        };
        if !ok || state.tx_log.last() != Some(rec) {
            return Err(LedgerError::Divergence(i));
        }
    }
    Ok(state)
}
