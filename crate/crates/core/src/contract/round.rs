use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{
    advance_epoch, blacklist_losers, submit, AccountId, ContractError, ContractState, Decision, SubmissionMode,
};
use crate::attack::{intercept, AttackError, InterceptError, NodePatch, PipelineError, SigningPipeline};
use crate::signing::{
    append_signature, sign_material, verify_and_load, EnclaveSignature, KeyError, LoadError, MeasurementHash,
    SigningKey, SigningMaterial, VendorMetadata, MATERIAL_LEN,
};

/// Anything the facility can ask for a node's signing material.
pub trait MaterialServer {
    /// `None` models an unreachable node.
    fn fetch(&mut self, account: &AccountId) -> Option<SigningMaterial>;
}

impl MaterialServer for BTreeMap<AccountId, SigningMaterial> {
    fn fetch(&mut self, account: &AccountId) -> Option<SigningMaterial> {
        self.get(account).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchError {
    #[error("no decision for this epoch")]
    NoDecision,
    #[error("epoch failed: no strict majority")]
    EpochFailed,
    #[error("no winning node served matching material")]
    AllWinnersUnreachable,
    #[error("stored material is malformed")]
    BadStoredMaterial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FetchSkip {
    Unreachable,
    /// The node answered with material whose hash is not the winning one.
    HashMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchReport {
    pub material: SigningMaterial,
    /// `None` when read straight from contract storage.
    pub served_by: Option<AccountId>,
    pub skipped: Vec<(AccountId, FetchSkip)>,
}

/// Material the decision endorses. Full mode reads contract storage; hash
/// mode asks winners in account order and keeps the first whose measurement
/// equals the winning hash.
pub fn fetch_majority_material(
    state: &ContractState,
    server: &mut dyn MaterialServer,
) -> Result<FetchReport, FetchError> {
    let d = state.decision.as_ref().ok_or(FetchError::NoDecision)?;
    let winning = d.winning_hash.ok_or(FetchError::EpochFailed)?;
    match state.mode() {
        SubmissionMode::FullMaterial => {
            let bytes: &[u8; MATERIAL_LEN] = state
                .storage
                .get(&winning)
                .and_then(|b| b.as_slice().try_into().ok())
                .ok_or(FetchError::BadStoredMaterial)?;
            Ok(FetchReport {
                material: SigningMaterial::from_bytes(bytes),
                served_by: None,
                skipped: Vec::new(),
            })
        }
        SubmissionMode::HashOnly => {
            let mut skipped = Vec::new();
            for acct in &d.winner_accounts {
                match server.fetch(acct) {
                    None => skipped.push((*acct, FetchSkip::Unreachable)),
                    Some(m) if m.measurement.0 != winning => skipped.push((*acct, FetchSkip::HashMismatch)),
                    Some(material) => {
                        return Ok(FetchReport {
                            material,
                            served_by: Some(*acct),
                            skipped,
                        })
                    }
                }
            }
            Err(FetchError::AllWinnersUnreachable)
        }
    }
}

/// Holds the signing key and signs only what the contract endorses.
#[derive(Debug)]
pub struct SignerFacility {
    key: SigningKey,
    pub signatures_issued: u32,
}

impl SignerFacility {
    pub fn new(key: SigningKey) -> Self {
        SignerFacility {
            key,
            signatures_issued: 0,
        }
    }

    pub fn public_fingerprint(&self) -> [u8; 32] {
        self.key.public().fingerprint()
    }

    pub fn sign_majority(
        &mut self,
        state: &ContractState,
        server: &mut dyn MaterialServer,
    ) -> Result<(FetchReport, EnclaveSignature), RoundError> {
        let report = fetch_majority_material(state, server)?;
        let sig = sign_material(&report.material, &self.key)?;
        self.signatures_issued += 1;
        Ok((report, sig))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuilderNode {
    pub account: AccountId,
    pub source_uri: String,
    pub honest: bool,
    /// Applied inside the interception window, before material generation.
    pub adversary_patch: Option<NodePatch>,
}

impl BuilderNode {
    pub fn honest(account: AccountId, source_uri: &str) -> Self {
        BuilderNode {
            account,
            source_uri: source_uri.into(),
            honest: true,
            adversary_patch: None,
        }
    }

    pub fn tampering(account: AccountId, source_uri: &str, patch: NodePatch) -> Self {
        BuilderNode {
            account,
            source_uri: source_uri.into(),
            honest: false,
            adversary_patch: Some(patch),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RoundError {
    #[error("node {0} pipeline: {1}")]
    Pipeline(AccountId, PipelineError),
    #[error("node {0} interception: {1}")]
    Intercept(AccountId, InterceptError),
    #[error("node {0} patch: {1}")]
    Patch(AccountId, AttackError),
    #[error("contract: {0}")]
    Contract(#[from] ContractError),
    #[error("not every expected node submitted")]
    Incomplete,
    #[error("epoch {} failed: no strict majority, nothing signed", .0.epoch)]
    EpochFailed(Decision),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Key(#[from] KeyError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeResult {
    pub account: AccountId,
    pub honest: bool,
    pub measurement: MeasurementHash,
    pub gas_charged: u64,
    /// The node's own image with the majority signature appended, loaded.
    pub load: Result<MeasurementHash, LoadError>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundOutcome {
    pub epoch: u64,
    pub decision: Decision,
    pub fetch: FetchReport,
    pub signature: EnclaveSignature,
    pub nodes: Vec<NodeResult>,
    pub blacklisted: BTreeSet<AccountId>,
}

impl RoundOutcome {
    pub fn verified(&self) -> usize {
        self.nodes.iter().filter(|n| n.load.is_ok()).count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "epoch {}: majority {} ({} of {} submissions)\n",
            self.epoch,
            self.fetch.material.measurement,
            self.decision.winner_accounts.len(),
            self.nodes.len()
        ));
        s.push_str("  node  account                                     honest  gas      bundle\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let verdict = match &n.load {
                Ok(_) => String::from("VERIFIED"),
                Err(LoadError::MeasurementMismatch { .. }) => String::from("REJECTED MeasurementMismatch"),
                Err(e) => format!("REJECTED {e}"),
            };
            s.push_str(&format!(
                "  {:>4}  {}  {:<6}  {:<7}  {verdict}\n",
                i,
                n.account,
                if n.honest { "yes" } else { "no" },
                n.gas_charged
            ));
        }
        s.push_str(&format!(
            "verified bundles: {}/{}, blacklisted: {}\n",
            self.verified(),
            self.nodes.len(),
            self.blacklisted.len()
        ));
        s
    }
}

/// One full distributed round: every node builds (tampering ones patch in the
/// interception window), submits, the contract decides, the facility signs
/// the majority material, every node appends the signature to its own image
/// and tries to load it. Losers are blacklisted.
pub fn run_build_round(
    nodes: &[BuilderNode],
    source: &str,
    metadata: VendorMetadata,
    contract: &mut ContractState,
    facility: &mut SignerFacility,
) -> Result<RoundOutcome, RoundError> {
    let mode = contract.mode();
    let mut built = Vec::with_capacity(nodes.len());
    let mut served = BTreeMap::new();
    for node in nodes {
        let acct = node.account;
        // Every node receives the same source bytes.
        let mut pipeline = SigningPipeline::new(source, metadata);
        if let Some(patch) = &node.adversary_patch {
            let mut handle = intercept(&mut pipeline).map_err(|e| RoundError::Intercept(acct, e))?;
            patch
                .apply_to_bytes(handle.image_bytes_mut())
                .map_err(|e| RoundError::Patch(acct, e))?;
            handle.resume();
        }
        let (bytes, material) = pipeline
            .generate_material()
            .map_err(|e| RoundError::Pipeline(acct, e))?;
        let payload: Vec<u8> = match mode {
            SubmissionMode::FullMaterial => material.to_bytes().to_vec(),
            SubmissionMode::HashOnly => material.measurement.0.to_vec(),
        };
        let rec = submit(contract, acct, &payload)?;
        served.insert(acct, material);
        built.push((node, bytes, material, rec.gas));
    }

    let decision = contract.decision.clone().ok_or(RoundError::Incomplete)?;
    if decision.failed() {
        return Err(RoundError::EpochFailed(decision));
    }
    let (fetch, signature) = facility.sign_majority(contract, &mut served)?;

    let nodes_out = built
        .into_iter()
        .map(|(node, bytes, material, gas)| {
            let bundle = append_signature(bytes, fetch.material, signature);
            NodeResult {
                account: node.account,
                honest: node.honest,
                measurement: material.measurement,
                gas_charged: gas,
                load: verify_and_load(&bundle).map(|l| l.measurement),
            }
        })
        .collect();

    let caller = *decision
        .winner_accounts
        .iter()
        .next()
        .expect("strict majority has winners");
    let blacklisted = blacklist_losers(contract, caller)?;
    Ok(RoundOutcome {
        epoch: decision.epoch,
        decision,
        fetch,
        signature,
        nodes: nodes_out,
        blacklisted,
    })
}

/// Closes the round's epoch so the next one can start.
pub fn finish_epoch(contract: &mut ContractState, caller: AccountId) -> Result<u64, ContractError> {
    advance_epoch(contract, caller)
}
