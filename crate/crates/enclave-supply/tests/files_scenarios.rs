use proptest::prelude::*;

use enclave_supply::agent_script::parse_agent_script;
use enclave_supply::files::{
    decode_bundle, decode_material, decode_signature, encode_bundle, encode_signature, key_der, load_key, read_bundle,
    FileError,
};
use enclave_supply::scenario::{run_scenario, Scenario, ScenarioName};
use enclave_supply_core::format::assemble;
use enclave_supply_core::samples;
use enclave_supply_core::signing::{bundled_key, sign_single_step, verify_and_load, SignedEnclave, VendorMetadata};

fn signed_minimal() -> SignedEnclave {
    let img = assemble(samples::MINIMAL).unwrap().image;
    sign_single_step(&img, VendorMetadata::default(), &bundled_key(0)).unwrap()
}

#[test]
fn bundle_file_round_trip() {
    let b = signed_minimal();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.sgxs1");
    std::fs::write(&p, encode_bundle(&b)).unwrap();
    let back = read_bundle(&p).unwrap();
    assert_eq!(back, b);
    verify_and_load(&back).unwrap();
    assert_eq!(decode_material(&b.material.to_bytes()).unwrap(), b.material);
    assert_eq!(decode_signature(&encode_signature(&b.signature)).unwrap(), b.signature);
}

#[test]
fn bundle_decoding_errors() {
    let bytes = encode_bundle(&signed_minimal());
    for cut in 0..bytes.len() {
        assert!(decode_bundle(&bytes[..cut]).is_err(), "prefix {cut}");
    }
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(decode_bundle(&wrong), Err(FileError::BadBundleMagic)));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(decode_bundle(&long), Err(FileError::BundleLength { .. })));
    assert!(matches!(decode_material(&[0; 63]), Err(FileError::MaterialLength(63))));
    assert!(read_bundle("/nonexistent/x.sgxs1").is_err());
}

#[test]
fn keys_by_name_and_by_file_sign_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("k.der");
    std::fs::write(&p, key_der("bundled:isv-beta").unwrap()).unwrap();
    let from_file = load_key(p.to_str().unwrap()).unwrap();
    let named = load_key("bundled:isv-beta").unwrap();
    assert_eq!(from_file.public(), named.public());
    assert!(matches!(load_key("bundled:nope"), Err(FileError::UnknownBundledKey(_))));
    std::fs::write(&p, b"not der").unwrap();
    assert!(matches!(load_key(p.to_str().unwrap()), Err(FileError::Key(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_bundles_survive_the_file_codec(image in proptest::collection::vec(any::<u8>(), 0..512), tweak in any::<u8>()) {
        let mut b = signed_minimal();
        b.image_bytes = image;
        b.material.metadata.date ^= u32::from(tweak);
        prop_assert_eq!(decode_bundle(&encode_bundle(&b)).unwrap(), b);
    }

    #[test]
    fn agent_script_parser_never_panics(text in "[a-z0-9x# \n]{0,80}") {
        let _ = parse_agent_script(&text);
    }
}

#[test]
fn every_scenario_passes_and_is_deterministic() {
    for name in ScenarioName::ALL {
        for seed in [0, 42] {
            let s = Scenario::new(name, seed);
            let a = run_scenario(&s).unwrap();
            let b = run_scenario(&s).unwrap();
            assert!(a.passed, "{}\n{}", name.as_str(), a.text);
            assert_eq!(a.text, b.text, "{}", name.as_str());
            assert_eq!(a.json, b.json);
            assert_eq!(a.json["passed"], true);
        }
    }
}

#[test]
fn scenario_names_parse() {
    for name in ScenarioName::ALL {
        assert_eq!(name.as_str().parse::<ScenarioName>().unwrap(), name);
    }
    assert!("ATTACK_EVERYTHING".parse::<ScenarioName>().is_err());
}

#[test]
fn leak_seed_changes_secrets_not_verdict() {
    let a = run_scenario(&Scenario::new(ScenarioName::AttackLeak, 1)).unwrap();
    let b = run_scenario(&Scenario::new(ScenarioName::AttackLeak, 2)).unwrap();
    assert!(a.passed && b.passed);
    assert_ne!(a.json["leaked_hex"], b.json["leaked_hex"]);
}

#[test]
fn distributed_scenario_with_colluding_half_fails_closed() {
    let s = Scenario::new(ScenarioName::MitigateDistributed, 0)
        .with("nodes", 4)
        .with("adversaries", 2)
        .with("mode", "hash");
    let r = run_scenario(&s).unwrap();
    assert!(r.passed, "{}", r.text);
    assert_eq!(r.json["report"]["signatures_issued"], 0);
    assert_eq!(r.json["report"]["round"]["status"], "failed");
}

#[test]
fn bad_scenario_params_are_reported() {
    let s = Scenario::new(ScenarioName::AttackLeak, 0).with("stack_bytes", "lots");
    assert!(run_scenario(&s).is_err());
    let s = Scenario::new(ScenarioName::MitigateDistributed, 0).with("mode", "sideways");
    assert!(run_scenario(&s).is_err());
}
