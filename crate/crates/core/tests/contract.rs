use std::collections::{BTreeMap, BTreeSet, HashSet};

use enclave_supply_core::attack::{LeakPatchSpec, NodePatch};
use enclave_supply_core::contract::{
    advance_epoch, blacklist_losers, contract_init, decide_majority, fetch_majority_material, fiat_cents,
    gas_and_fiat_report, pack_blocks, pack_gas, replay, run_build_round, submit, verify_chain, AccountId, BuilderNode,
    ContractConfig, ContractError, FetchError, FetchSkip, GasModel, MaterialServer, RoundError, SignerFacility,
    SubmissionMode, TxRecord,
};
use enclave_supply_core::samples::{self, remote_decrypt};
use enclave_supply_core::signing::{bundled_key, LoadError, MeasurementHash, SigningMaterial, VendorMetadata};
use proptest::prelude::*;

fn accounts(n: u32) -> Vec<AccountId> {
    (0..n).map(AccountId::for_node).collect()
}

fn payload(mode: SubmissionMode, tag: u8) -> Vec<u8> {
    vec![tag; mode.payload_len()]
}

/// Independent charge oracle: walk the sequence, remember which values were
/// seen, charge first/other accordingly.
fn oracle_charges(seq: &[u8], mode: SubmissionMode, m: &GasModel) -> Vec<u64> {
    let mut seen = HashSet::new();
    seq.iter().map(|v| m.submission_gas(mode, seen.insert(*v))).collect()
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

#[test]
fn ten_honest_full_submissions_cost_table_values() {
    let acc = accounts(10);
    let mut s = contract_init(&acc, ContractConfig::new(SubmissionMode::FullMaterial)).unwrap();
    let charges: Vec<u64> = acc.iter().map(|a| submit(&mut s, *a, &[1; 64]).unwrap().gas).collect();
    assert_eq!(charges[0], 448_211);
    assert!(charges[1..].iter().all(|g| *g == 83_809));
    assert_eq!(charges.iter().sum::<u64>(), 1_202_492);
    let d = s.decision.clone().unwrap();
    assert!(d.strict_majority && d.loser_accounts.is_empty());
}

#[test]
fn hash_mode_tamperer_pays_first_store() {
    let m = GasModel::default();
    let acc = accounts(10);
    let mut s = contract_init(&acc, ContractConfig::new(SubmissionMode::HashOnly)).unwrap();
    let values: Vec<u8> = (0..10).map(|i| if i == 4 { 9 } else { 1 }).collect();
    let charges: Vec<u64> = acc
        .iter()
        .zip(&values)
        .map(|(a, v)| submit(&mut s, *a, &[*v; 32]).unwrap().gas)
        .collect();
    assert_eq!(charges, oracle_charges(&values, SubmissionMode::HashOnly, &m));
    assert_eq!(charges.iter().filter(|g| **g == 91_322).count(), 2);
    let d = decide_majority(&s).unwrap();
    assert_eq!(d.loser_accounts, BTreeSet::from([acc[4]]));
}

#[test]
fn gas_sum_matches_oracle_for_every_order() {
    let m = GasModel::default();
    for mode in [SubmissionMode::FullMaterial, SubmissionMode::HashOnly] {
        for n in 1..=6u32 {
            let acc = accounts(n);
            // Two distinct values so the first-store rule fires more than once.
            let values: Vec<u8> = (0..n).map(|i| if i % 3 == 2 { 2 } else { 1 }).collect();
            let idx: Vec<usize> = (0..n as usize).collect();
            for order in permutations(&idx) {
                let mut s = contract_init(&acc, ContractConfig::new(mode)).unwrap();
                let seq: Vec<u8> = order.iter().map(|i| values[*i]).collect();
                let charged: u64 = order
                    .iter()
                    .map(|i| submit(&mut s, acc[*i], &payload(mode, values[*i])).unwrap().gas)
                    .sum();
                assert_eq!(charged, oracle_charges(&seq, mode, &m).iter().sum::<u64>());
            }
        }
    }
}

#[test]
fn exhaustive_majority_safety() {
    for n in 3..=9u32 {
        let acc = accounts(n);
        let threshold = n.div_ceil(2);
        for mask in 0u32..(1 << n) {
            let f = mask.count_ones();
            let mut s = contract_init(&acc, ContractConfig::new(SubmissionMode::FullMaterial)).unwrap();
            for (i, a) in acc.iter().enumerate() {
                let tag = if mask >> i & 1 == 1 { 0xAD } else { 0x11 };
                submit(&mut s, *a, &[tag; 64]).unwrap();
            }
            let d = decide_majority(&s).unwrap();
            let honest_won = match fetch_majority_material(&s, &mut BTreeMap::new()) {
                Ok(r) => r.material.to_bytes() == [0x11; 64],
                Err(FetchError::EpochFailed) => false,
                Err(e) => panic!("{e}"),
            };
            assert_eq!(honest_won, f < threshold, "n={n} mask={mask:b}");
            if 2 * f == n {
                assert!(d.failed(), "tie must fail closed");
            }
        }
    }
}

/// Scripted node responses for the hash-only fetch path.
#[derive(Clone, Copy)]
enum Reply {
    Offline,
    Wrong,
    Right,
}

struct Scripted {
    good: SigningMaterial,
    replies: BTreeMap<AccountId, Reply>,
    asked: Vec<AccountId>,
}

impl MaterialServer for Scripted {
    fn fetch(&mut self, account: &AccountId) -> Option<SigningMaterial> {
        self.asked.push(*account);
        match self.replies[account] {
            Reply::Offline => None,
            Reply::Wrong => Some(SigningMaterial {
                measurement: MeasurementHash([0xEE; 32]),
                ..self.good
            }),
            Reply::Right => Some(self.good),
        }
    }
}

#[test]
fn hash_mode_fetch_over_all_reply_patterns() {
    let good = SigningMaterial {
        metadata: VendorMetadata::default(),
        measurement: MeasurementHash([0x42; 32]),
    };
    let acc = accounts(3);
    let mut s = contract_init(&acc, ContractConfig::new(SubmissionMode::HashOnly)).unwrap();
    for a in &acc {
        submit(&mut s, *a, &good.measurement.0).unwrap();
    }
    let winners: Vec<AccountId> = s.decision.as_ref().unwrap().winner_accounts.iter().copied().collect();
    let choices = [Reply::Offline, Reply::Wrong, Reply::Right];
    for code in 0..27 {
        let pattern: Vec<Reply> = (0..3).map(|i| choices[code / 3usize.pow(i) % 3]).collect();
        let mut server = Scripted {
            good,
            replies: winners.iter().copied().zip(pattern.iter().copied()).collect(),
            asked: Vec::new(),
        };
        let first_good = pattern.iter().position(|r| matches!(r, Reply::Right));
        match (fetch_majority_material(&s, &mut server), first_good) {
            (Ok(r), Some(k)) => {
                assert_eq!(r.material, good);
                assert_eq!(r.served_by, Some(winners[k]));
                assert_eq!(r.skipped.len(), k);
                for (j, (a, why)) in r.skipped.iter().enumerate() {
                    assert_eq!(*a, winners[j]);
                    let expect = if matches!(pattern[j], Reply::Offline) {
                        FetchSkip::Unreachable
                    } else {
                        FetchSkip::HashMismatch
                    };
                    assert_eq!(*why, expect);
                }
            }
            (Err(FetchError::AllWinnersUnreachable), None) => assert_eq!(server.asked, winners),
            (other, _) => panic!("pattern {code}: {other:?}"),
        }
    }
}

#[test]
fn fetch_requires_decision() {
    let acc = accounts(2);
    let s = contract_init(&acc, ContractConfig::new(SubmissionMode::HashOnly)).unwrap();
    assert_eq!(
        fetch_majority_material(&s, &mut BTreeMap::new()),
        Err(FetchError::NoDecision)
    );
}

fn leak_patch() -> NodePatch {
    NodePatch::Leak(LeakPatchSpec::new(remote_decrypt::STATUS, 32, 48).unwrap())
}

fn nodes(n: u32, bad: &[u32]) -> Vec<BuilderNode> {
    accounts(n)
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            if bad.contains(&(i as u32)) {
                BuilderNode::tampering(a, "repo://remote-decrypt", leak_patch())
            } else {
                BuilderNode::honest(a, "repo://remote-decrypt")
            }
        })
        .collect()
}

#[test]
fn round_with_one_tamperer() {
    for mode in [SubmissionMode::FullMaterial, SubmissionMode::HashOnly] {
        let ns = nodes(10, &[3]);
        let acc: Vec<AccountId> = ns.iter().map(|n| n.account).collect();
        let mut c = contract_init(&acc, ContractConfig::new(mode)).unwrap();
        let mut fac = SignerFacility::new(bundled_key(2));
        let out = run_build_round(
            &ns,
            samples::REMOTE_DECRYPT,
            VendorMetadata::default(),
            &mut c,
            &mut fac,
        )
        .unwrap();
        assert_eq!(out.verified(), 9);
        assert!(matches!(out.nodes[3].load, Err(LoadError::MeasurementMismatch { .. })));
        assert_eq!(out.blacklisted, BTreeSet::from([acc[3]]));
        assert_eq!(fac.signatures_issued, 1);

        advance_epoch(&mut c, acc[0]).unwrap();
        assert_eq!(c.expected_count(), 9);
        assert_eq!(
            submit(&mut c, acc[3], &payload(mode, 1)),
            Err(ContractError::Blacklisted(acc[3]))
        );
        assert_eq!(replay(&c.tx_log).unwrap(), c);
    }
}

#[test]
fn round_without_adversaries() {
    let ns = nodes(10, &[]);
    let acc: Vec<AccountId> = ns.iter().map(|n| n.account).collect();
    let mut c = contract_init(&acc, ContractConfig::new(SubmissionMode::FullMaterial)).unwrap();
    let mut fac = SignerFacility::new(bundled_key(2));
    let out = run_build_round(
        &ns,
        samples::REMOTE_DECRYPT,
        VendorMetadata::default(),
        &mut c,
        &mut fac,
    )
    .unwrap();
    assert_eq!(out.verified(), 10);
    assert!(out.blacklisted.is_empty());
    let report = gas_and_fiat_report(&c, 1, &GasModel::default());
    assert_eq!(report.total_gas, 1_202_492);
    assert_eq!(report.total_cents, 330);
}

#[test]
fn colluding_half_ties_and_nothing_is_signed() {
    let ns = nodes(4, &[1, 2]);
    let acc: Vec<AccountId> = ns.iter().map(|n| n.account).collect();
    let mut c = contract_init(&acc, ContractConfig::new(SubmissionMode::FullMaterial)).unwrap();
    let mut fac = SignerFacility::new(bundled_key(2));
    let err = run_build_round(
        &ns,
        samples::REMOTE_DECRYPT,
        VendorMetadata::default(),
        &mut c,
        &mut fac,
    )
    .unwrap_err();
    assert!(matches!(err, RoundError::EpochFailed(_)));
    assert_eq!(fac.signatures_issued, 0);
    assert_eq!(blacklist_losers(&mut c, acc[0]), Err(ContractError::EpochFailed));
}

#[test]
fn cost_report_for_epoch_with_tamperer() {
    let m = GasModel::default();
    let acc = accounts(10);
    let mut s = contract_init(&acc, ContractConfig::new(SubmissionMode::HashOnly)).unwrap();
    for (i, a) in acc.iter().enumerate() {
        submit(&mut s, *a, &[if i == 0 { 7 } else { 1 }; 32]).unwrap();
    }
    let r = gas_and_fiat_report(&s, 1, &m);
    assert_eq!(r.total_cents, 25 + 25 + 8 * 11);
    assert_eq!(r.honest_epoch_cents, 25 + 9 * 11);
    assert_eq!(r.marginal_cents, fiat_cents(42_636, &m));
    let b = pack_blocks(&s.tx_log, &m, 0.0).unwrap();
    assert_eq!((b.blocks, b.confirmation_seconds), (1, 15));
}

#[test]
fn no_ten_node_epoch_needs_two_blocks_without_load() {
    let m = GasModel::default();
    for mode in [SubmissionMode::FullMaterial, SubmissionMode::HashOnly] {
        for n in 1..=10usize {
            // Worst case: every node stores a distinct value.
            let gas = vec![m.submission_gas(mode, true); n];
            assert_eq!(pack_gas(&gas, &m, 0.0).unwrap().blocks, 1);
        }
    }
}

/// Random epoch: random accounts, random tampering, optional timeout,
/// blacklisting and advancing across a few epochs.
fn random_history(seed: u64) -> Vec<TxRecord> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let n = rng.gen_range(1..=8);
    let acc = accounts(n);
    let mode = if rng.gen() {
        SubmissionMode::FullMaterial
    } else {
        SubmissionMode::HashOnly
    };
    let mut s = contract_init(&acc, ContractConfig::new(mode)).unwrap();
    for _ in 0..rng.gen_range(1..=3) {
        let live: Vec<AccountId> = s.expected_accounts().into_iter().collect();
        if live.is_empty() {
            break;
        }
        let submitting = if rng.gen_bool(0.2) {
            rng.gen_range(0..=live.len())
        } else {
            live.len()
        };
        for a in &live[..submitting] {
            let tag = if rng.gen_bool(0.25) { rng.gen_range(2..5) } else { 1 };
            submit(&mut s, *a, &payload(mode, tag)).unwrap();
        }
        if s.decision.is_none() {
            enclave_supply_core::contract::close_on_timeout(&mut s, live[0], 100 + rng.gen_range(0..50)).unwrap();
        }
        let _ = blacklist_losers(&mut s, live[0]);
        if let Some(caller) = s.expected_accounts().into_iter().next() {
            advance_epoch(&mut s, caller).unwrap();
        }
    }
    s.tx_log
}

#[test]
fn random_histories_replay_and_detect_byte_flips() {
    for seed in 0..100 {
        let log = random_history(seed);
        let replayed = replay(&log).unwrap();
        assert_eq!(replayed.tx_log, log);
        assert_eq!(
            replay(&replayed.tx_log).unwrap().canonical_bytes(),
            replayed.canonical_bytes()
        );
        for (i, rec) in log.iter().enumerate() {
            let bytes = rec.to_bytes();
            for j in 0..bytes.len() {
                let mut b = bytes.clone();
                b[j] ^= 0x01;
                let Ok(mutated) = TxRecord::from_bytes(&b) else {
                    continue;
                };
                if mutated == *rec {
                    continue;
                }
                let mut forged = log.clone();
                forged[i] = mutated;
                assert!(verify_chain(&forged).is_err(), "seed {seed} record {i} byte {j}");
            }
        }
    }
}

proptest! {
    #[test]
    fn decision_sets_partition_submitters(tags in proptest::collection::vec(0u8..3, 1..10)) {
        let acc = accounts(tags.len() as u32);
        let mut s = contract_init(&acc, ContractConfig::new(SubmissionMode::HashOnly)).unwrap();
        for (a, t) in acc.iter().zip(&tags) {
            submit(&mut s, *a, &[*t; 32]).unwrap();
        }
        let d = decide_majority(&s).unwrap();
        prop_assert!(d.winner_accounts.is_disjoint(&d.loser_accounts));
        if let Some(h) = d.winning_hash {
            let count = tags.iter().filter(|t| [**t; 32] == h).count();
            prop_assert!(count * 2 > tags.len());
            prop_assert_eq!(d.winner_accounts.len() + d.loser_accounts.len(), tags.len());
        }
    }

    #[test]
    fn fiat_is_monotone_in_gas(a in 0u64..50_000_000, b in 0u64..50_000_000) {
        let m = GasModel::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fiat_cents(lo, &m) <= fiat_cents(hi, &m));
    }
}
