//! Distributed build simulation: N builder nodes, F colluding tamperers, one
//! contract, one signer facility.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use enclave_supply_core::attack::{LeakPatchSpec, NodePatch};
use enclave_supply_core::contract::{
    contract_init, gas_and_fiat_report, pack_blocks, submit, AccountId, BlockReport, BuilderNode, ContractConfig,
    ContractError, ContractState, CostReport, Decision, GasModel, PackError, RoundError, RoundOutcome, SignerFacility,
    SubmissionMode, TxRecord,
};
use enclave_supply_core::samples::{self, remote_decrypt};
use enclave_supply_core::signing::{bundled_key, VendorMetadata};

use crate::files::{read_text, FileError};

/// The contract behind a lock: concurrent callers are totally ordered, and
/// readers get a consistent snapshot.
#[derive(Debug)]
pub struct SharedContract {
    inner: Mutex<ContractState>,
}

impl SharedContract {
    pub fn new(state: ContractState) -> Self {
        SharedContract {
            inner: Mutex::new(state),
        }
    }

    pub fn submit(&self, account: AccountId, payload: &[u8]) -> Result<TxRecord, ContractError> {
        submit(&mut self.lock(), account, payload)
    }

    pub fn snapshot(&self) -> ContractState {
        self.lock().clone()
    }

    pub fn lock(&self) -> MutexGuard<'_, ContractState> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn into_inner(self) -> ContractState {
        self.inner.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GasConfigError {
    #[error(transparent)]
    File(#[from] FileError),
    #[error("gas config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("gas config: {0}")]
    Invalid(&'static str),
}

/// TOML file whose keys are the `GasModel` field names; missing keys keep
/// their defaults.
pub fn load_gas_model(path: impl AsRef<Path>) -> Result<GasModel, GasConfigError> {
    let m: GasModel = toml::from_str(&read_text(path)?)?;
    m.validate().map_err(GasConfigError::Invalid)?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct DistConfig {
    pub nodes: u32,
    pub adversaries: u32,
    pub mode: SubmissionMode,
    pub ambient_load: f64,
    pub seed: u64,
    pub gas: GasModel,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig {
            nodes: 10,
            adversaries: 1,
            mode: SubmissionMode::FullMaterial,
            ambient_load: 0.0,
            seed: 0,
            gas: GasModel::default(),
        }
    }
}

#[derive(Debug)]
pub enum RoundResult {
    Signed(Box<RoundOutcome>),
    Failed(Decision),
}

#[derive(Debug)]
pub struct DistReport {
    pub config: DistConfig,
    pub adversary_nodes: BTreeSet<u32>,
    pub result: RoundResult,
    pub cost: CostReport,
    pub blocks: BlockReport,
    pub signatures_issued: u32,
    pub honest_signed: bool,
    /// Outcome agrees with the majority bound: honest build signed iff
    /// adversaries < ceil(n/2), ties fail with nothing signed.
    pub verdict_holds: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum DistError {
    #[error("need at least one node and at most as many adversaries as nodes")]
    BadCounts,
    #[error(transparent)]
    Round(RoundError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

/// The patch every colluding node applies, so they all agree on one hash.
pub fn colluding_patch() -> NodePatch {
    NodePatch::Leak(LeakPatchSpec::new(remote_decrypt::STATUS, 32, 48).expect("valid spec"))
}

/// Seeded choice of which node indices are adversarial.
pub fn place_adversaries(nodes: u32, adversaries: u32, seed: u64) -> BTreeSet<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, nodes as usize, adversaries as usize)
        .into_iter()
        .map(|i| i as u32)
        .collect()
}

pub fn run_dist_sim(cfg: &DistConfig) -> Result<DistReport, DistError> {
    if cfg.nodes == 0 || cfg.adversaries > cfg.nodes {
        return Err(DistError::BadCounts);
    }
    let bad = place_adversaries(cfg.nodes, cfg.adversaries, cfg.seed);
    let nodes: Vec<BuilderNode> = (0..cfg.nodes)
        .map(|i| {
            let acct = AccountId::for_node(i);
            let uri = "repo://remote-decrypt";
            if bad.contains(&i) {
                BuilderNode::tampering(acct, uri, colluding_patch())
            } else {
                BuilderNode::honest(acct, uri)
            }
        })
        .collect();
    let accounts: Vec<AccountId> = nodes.iter().map(|n| n.account).collect();
    let mut config = ContractConfig::new(cfg.mode);
    config.gas = cfg.gas.clone();
    let mut contract = contract_init(&accounts, config)?;
    let mut facility = SignerFacility::new(bundled_key(2));
    let metadata = VendorMetadata {
        vendor_id: VendorMetadata::vendor_from_label("isv"),
        date: 20_190_611,
        attributes: 0,
        version: 1,
    };

    let round = enclave_supply_core::contract::run_build_round(
        &nodes,
        samples::REMOTE_DECRYPT,
        metadata,
        &mut contract,
        &mut facility,
    );
    let result = match round {
        Ok(o) => RoundResult::Signed(Box::new(o)),
        Err(RoundError::EpochFailed(d)) => RoundResult::Failed(d),
        Err(e) => return Err(DistError::Round(e)),
    };

    let honest_signed = match &result {
        RoundResult::Signed(o) => {
            o.nodes.iter().filter(|n| n.honest).all(|n| n.load.is_ok()) && o.nodes.iter().any(|n| n.honest)
        }
        RoundResult::Failed(_) => false,
    };
    let n = cfg.nodes;
    let f = cfg.adversaries;
    let expected_honest = f < n.div_ceil(2) && f < n;
    let verdict_holds = honest_signed == expected_honest
        && match &result {
            RoundResult::Failed(_) => facility.signatures_issued == 0 && 2 * f == n,
            RoundResult::Signed(o) => {
                facility.signatures_issued == 1
                    && (!expected_honest || (o.verified() == (n - f) as usize && o.blacklisted.len() == f as usize))
            }
        };

    let cost = gas_and_fiat_report(&contract, 1, &cfg.gas);
    let blocks = pack_blocks(contract.epoch_log(1), &cfg.gas, cfg.ambient_load)?;
    Ok(DistReport {
        config: cfg.clone(),
        adversary_nodes: bad,
        result,
        cost,
        blocks,
        signatures_issued: facility.signatures_issued,
        honest_signed,
        verdict_holds,
    })
}

fn mode_name(m: SubmissionMode) -> &'static str {
    match m {
        SubmissionMode::FullMaterial => "full",
        SubmissionMode::HashOnly => "hash",
    }
}

impl DistReport {
    pub fn render(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "dist-sim: nodes={} adversaries={} mode={} lambda={} seed={}\n",
            c.nodes,
            c.adversaries,
            mode_name(c.mode),
            c.ambient_load,
            c.seed
        );
        s += &format!("adversarial nodes: {:?}\n", self.adversary_nodes);
        s += "\n== round ==\n";
        match &self.result {
            RoundResult::Signed(o) => s += &o.render(),
            RoundResult::Failed(d) => {
                s += &format!(
                    "epoch {} FAILED: no strict majority ({} submitters tied), nothing signed\n",
                    d.epoch,
                    d.winner_accounts.len() + d.loser_accounts.len()
                )
            }
        }
        s += &format!("signatures issued: {}\n", self.signatures_issued);
        s += &format!(
            "honest build signed: {}\n",
            if self.honest_signed { "yes" } else { "no" }
        );
        s += "\n== cost ==\n";
        s += &self.cost.render();
        s += "\n== blocks ==\n";
        s += &format!(
            "{} block(s) of {} usable gas, confirmation {} s\n",
            self.blocks.blocks, self.blocks.capacity, self.blocks.confirmation_seconds
        );
        s += &format!("verdict: {}\n", if self.verdict_holds { "PASS" } else { "FAIL" });
        s
    }

    pub fn to_json(&self) -> Value {
        let c = &self.config;
        let round = match &self.result {
            RoundResult::Signed(o) => json!({
                "status": "signed",
                "epoch": o.epoch,
                "majority_measurement": o.fetch.material.measurement.to_string(),
                "verified": o.verified(),
                "blacklisted": o.blacklisted.iter().map(|a| a.to_string()).collect::<Vec<_>>(),
                "nodes": o.nodes.iter().map(|n| json!({
                    "account": n.account.to_string(),
                    "honest": n.honest,
                    "measurement": n.measurement.to_string(),
                    "gas": n.gas_charged,
                    "load": match &n.load { Ok(_) => "verified".to_string(), Err(e) => e.to_string() },
                })).collect::<Vec<_>>(),
            }),
            RoundResult::Failed(d) => json!({ "status": "failed", "epoch": d.epoch }),
        };
        json!({
            "config": {
                "nodes": c.nodes,
                "adversaries": c.adversaries,
                "mode": mode_name(c.mode),
                "lambda": c.ambient_load,
                "seed": c.seed,
                "gas_model": c.gas,
            },
            "adversary_nodes": self.adversary_nodes,
            "round": round,
            "signatures_issued": self.signatures_issued,
            "honest_signed": self.honest_signed,
            "cost": self.cost,
            "blocks": self.blocks,
            "verdict": self.verdict_holds,
        })
    }
}
