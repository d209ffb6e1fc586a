use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ContractState, SubmissionMode, TxKind, TxRecord};

/// Gas prices and chain parameters. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasModel {
    pub first_submission_full: u64,
    pub other_submission_full: u64,
    pub first_submission_hash: u64,
    pub other_submission_hash: u64,
    pub block_gas_limit: u64,
    pub block_time_seconds: u32,
    pub gwei_per_gas: f64,
    pub usd_per_gwei: f64,
}

impl Default for GasModel {
    fn default() -> Self {
        GasModel {
            first_submission_full: 448_211,
            other_submission_full: 83_809,
            first_submission_hash: 91_322,
            other_submission_hash: 42_636,
            block_gas_limit: 10_000_000,
            block_time_seconds: 15,
            gwei_per_gas: 14.8,
            usd_per_gwei: 186e-9,
        }
    }
}

impl GasModel {
    pub fn submission_gas(&self, mode: SubmissionMode, first_store: bool) -> u64 {
        match (mode, first_store) {
            (SubmissionMode::FullMaterial, true) => self.first_submission_full,
            (SubmissionMode::FullMaterial, false) => self.other_submission_full,
            (SubmissionMode::HashOnly, true) => self.first_submission_hash,
            (SubmissionMode::HashOnly, false) => self.other_submission_hash,
        }
    }

    /// Positive values, and the first store dearer than later ones.
    pub fn validate(&self) -> Result<(), &'static str> {
        if [
            self.first_submission_full,
            self.other_submission_full,
            self.first_submission_hash,
            self.other_submission_hash,
            self.block_gas_limit,
        ]
        .contains(&0)
            || self.block_time_seconds == 0
            || !(self.gwei_per_gas > 0.0 && self.usd_per_gwei > 0.0)
        {
            return Err("gas model values must be positive");
        }
        if self.first_submission_full <= self.other_submission_full
            || self.first_submission_hash <= self.other_submission_hash
        {
            return Err("first submission must cost more than later ones");
        }
        Ok(())
    }

    pub fn usd(&self, gas: u64) -> f64 {
        gas as f64 * self.gwei_per_gas * self.usd_per_gwei
    }
}

/// Fiat cost in whole cents, truncated toward zero.
pub fn fiat_cents(gas: u64, model: &GasModel) -> u64 {
    // Nudge by a tiny epsilon so exact cent values are not lost to float error.
    (model.usd(gas) * 100.0 + 1e-9) as u64
}

pub fn format_cents(cents: u64) -> String {
    format!("${}.{:02}", cents / 100, cents % 100)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub seq: u64,
    pub label: &'static str,
    pub gas: u64,
    pub cents: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub epoch: u64,
    pub rows: Vec<CostRow>,
    pub total_gas: u64,
    /// Sum of the per-transaction truncated amounts.
    pub total_cents: u64,
    pub exact_usd: f64,
    /// What one more honest node adds.
    pub marginal_cents: u64,
    /// Cost of the same epoch had every expected node submitted the same payload.
    pub honest_epoch_gas: u64,
    pub honest_epoch_cents: u64,
}

impl CostReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("  seq  tx              gas        fiat\n");
        for r in &self.rows {
            s.push_str(&format!(
                "  {:>3}  {:<12} {:>9}  {:>8}\n",
                r.seq,
                r.label,
                r.gas,
                format_cents(r.cents)
            ));
        }
        s.push_str(&format!(
            "epoch {} total: {} gas, {} (exact ${:.4})\n",
            self.epoch,
            self.total_gas,
            format_cents(self.total_cents),
            self.exact_usd
        ));
        s.push_str(&format!(
            "honest-epoch total: {} gas, {}\n",
            self.honest_epoch_gas,
            format_cents(self.honest_epoch_cents)
        ));
        s.push_str(&format!(
            "marginal cost per node: {}\n",
            format_cents(self.marginal_cents)
        ));
        s
    }
}

fn label(kind: &TxKind) -> &'static str {
    match kind {
        TxKind::Init { .. } => "init",
        TxKind::Submit { .. } => "submit",
        TxKind::BlacklistLosers { .. } => "blacklist",
        TxKind::AdvanceEpoch { .. } => "advance",
        TxKind::Timeout { .. } => "timeout",
    }
}

/// Costs of one epoch's transactions priced under `model`. Only submissions
/// carry gas.
pub fn gas_and_fiat_report(state: &ContractState, epoch: u64, model: &GasModel) -> CostReport {
    let mode = state.mode();
    let rows: Vec<CostRow> = state
        .epoch_log(epoch)
        .filter(|r| r.gas > 0)
        .map(|r| CostRow {
            seq: r.seq,
            label: label(&r.kind),
            gas: r.gas,
            cents: fiat_cents(r.gas, model),
        })
        .collect();
    let total_gas: u64 = rows.iter().map(|r| r.gas).sum();
    let n = rows.len().max(1) as u64;
    let first = model.submission_gas(mode, true);
    let other = model.submission_gas(mode, false);
    CostReport {
        epoch,
        total_gas,
        total_cents: rows.iter().map(|r| r.cents).sum(),
        exact_usd: model.usd(total_gas),
        marginal_cents: fiat_cents(other, model),
        honest_epoch_gas: first + (n - 1) * other,
        honest_epoch_cents: fiat_cents(first, model) + (n - 1) * fiat_cents(other, model),
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PackError {
    #[error("transaction {index} needs {gas} gas, more than the {capacity} available per block")]
    TxTooLarge { index: usize, gas: u64, capacity: u64 },
    #[error("ambient load must be in [0, 1), got {0}")]
    BadLoad(f64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockReport {
    pub blocks: u32,
    pub confirmation_seconds: u64,
    /// Gas available to us per block after the ambient reservation.
    pub capacity: u64,
    pub gas_per_block: Vec<u64>,
}

/// Sequential packing: each transaction goes into the current block if it
/// fits, otherwise a new block is opened. `ambient_load` reserves that share
/// of every block for foreign traffic.
pub fn pack_gas(gas: &[u64], model: &GasModel, ambient_load: f64) -> Result<BlockReport, PackError> {
    if !(0.0..1.0).contains(&ambient_load) {
        return Err(PackError::BadLoad(ambient_load));
    }
    let capacity = ((1.0 - ambient_load) * model.block_gas_limit as f64) as u64;
    let mut blocks: Vec<u64> = Vec::new();
    for (index, &g) in gas.iter().enumerate().filter(|(_, g)| **g > 0) {
        if g > capacity {
            return Err(PackError::TxTooLarge {
                index,
                gas: g,
                capacity,
            });
        }
        match blocks.last_mut() {
            Some(used) if *used + g <= capacity => *used += g,
            _ => blocks.push(g),
        }
    }
    Ok(BlockReport {
        blocks: blocks.len() as u32,
        confirmation_seconds: blocks.len() as u64 * u64::from(model.block_time_seconds),
        capacity,
        gas_per_block: blocks,
    })
}

pub fn pack_blocks<'a>(
    tx_log: impl IntoIterator<Item = &'a TxRecord>,
    model: &GasModel,
    ambient_load: f64,
) -> Result<BlockReport, PackError> {
    let gas: Vec<u64> = tx_log.into_iter().map(|r| r.gas).collect();
    pack_gas(&gas, model, ambient_load)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn per_tx_fiat_truncates() {
        let m = GasModel::default();
        let cents: Vec<u64> = [448_211, 83_809, 91_322, 42_636]
            .iter()
            .map(|g| fiat_cents(*g, &m))
            .collect();
        assert_eq!(cents, [123, 23, 25, 11]);
        assert_eq!(format_cents(330), "$3.30");
        assert_eq!(format_cents(5), "$0.05");
    }

    #[test]
    fn default_model_is_valid() {
        GasModel::default().validate().unwrap();
        let mut m = GasModel::default();
        m.other_submission_hash = m.first_submission_hash;
        assert!(m.validate().is_err());
    }

    #[test]
    fn packing() {
        let m = GasModel::default();
        let mut txs = vec![448_211];
        txs.extend([83_809; 9]);
        let r = pack_gas(&txs, &m, 0.0).unwrap();
        assert_eq!((r.blocks, r.confirmation_seconds), (1, 15));
        let r = pack_gas(&txs, &m, 0.95).unwrap();
        assert_eq!((r.blocks, r.confirmation_seconds), (3, 45));
        assert_eq!(r.gas_per_block.iter().sum::<u64>(), 1_202_492);
        assert!(matches!(
            pack_gas(&[10_000_001], &m, 0.0),
            Err(PackError::TxTooLarge { .. })
        ));
        assert!(matches!(pack_gas(&[1], &m, 1.0), Err(PackError::BadLoad(_))));
    }
}
