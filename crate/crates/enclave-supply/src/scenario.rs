//! The four named narratives, each a deterministic function of its seed and
//! parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use enclave_supply_core::attack::{
    intercept, make_leak_patch, make_tamper_patch, InterceptError, LeakPatchSpec, NodePatch, SigningPipeline,
    TamperPatchSpec, MARKER,
};
use enclave_supply_core::contract::SubmissionMode;
use enclave_supply_core::format::assemble;
use enclave_supply_core::samples::{self, remote_decrypt, xor_stream};
use enclave_supply_core::signing::{bundled_key, verify_and_load, LoadError, LoadedEnclave, VendorMetadata};
use enclave_supply_core::vm::{
    self, hexdump, run_with_agent, EcallRequest, MemoryLayout, Outcome, UntrustedAgent, DEFAULT_STEP_BUDGET,
};

use crate::central::{
    adversary_post_hook_tamper, build_and_sign_atomic, establish_channel, isv_recompute, platform_for_seed,
    AtomicBuilder, BuildRequest, BuilderManifest, CentralError, ChannelAdversary, ChannelError, Mutation, Passive,
};
use crate::dist::{run_dist_sim, DistConfig};
use crate::files::key_der;

pub const OUT_BUFFER: u32 = 0x1000;
pub const CIPHER_BUFFER: u32 = 0x2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioName {
    AttackLeak,
    AttackTamper,
    MitigateCentral,
    MitigateDistributed,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::AttackLeak,
        ScenarioName::AttackTamper,
        ScenarioName::MitigateCentral,
        ScenarioName::MitigateDistributed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::AttackLeak => "ATTACK_LEAK",
            ScenarioName::AttackTamper => "ATTACK_TAMPER",
            ScenarioName::MitigateCentral => "MITIGATE_CENTRAL",
            ScenarioName::MitigateDistributed => "MITIGATE_DISTRIBUTED",
        }
    }
}

impl FromStr for ScenarioName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str() == norm)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub name: ScenarioName,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
}

impl Scenario {
    pub fn new(name: ScenarioName, seed: u64) -> Self {
        Scenario {
            name,
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.into(), value.to_string());
        self
    }

    fn param<T: FromStr>(&self, key: &str, default: T) -> Result<T, ScenarioError> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ScenarioError::BadParam {
                key: key.into(),
                value: v.clone(),
            }),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("parameter {key}={value} is not valid")]
    BadParam { key: String, value: String },
    #[error("{0}")]
    Step(String),
}

fn step<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> ScenarioError + '_ {
    move |e| ScenarioError::Step(format!("{what}: {e}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub name: ScenarioName,
    pub text: String,
    pub json: Value,
    /// Every expected verdict held.
    pub passed: bool,
}

pub fn run_scenario(s: &Scenario) -> Result<Report, ScenarioError> {
    match s.name {
        ScenarioName::AttackLeak => attack_leak(s),
        ScenarioName::AttackTamper => attack_tamper(s),
        ScenarioName::MitigateCentral => mitigate_central(s),
        ScenarioName::MitigateDistributed => mitigate_distributed(s),
    }
}

fn metadata() -> VendorMetadata {
    VendorMetadata {
        vendor_id: VendorMetadata::vendor_from_label("isv"),
        date: 20_190_611,
        attributes: 0,
        version: 1,
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// The compromised-host pipeline: intercept after compilation, patch, resume,
/// sign, then load the bundle the way a user would.
fn patched_and_signed(key_index: usize, patch: &NodePatch, text: &mut String) -> Result<LoadedEnclave, ScenarioError> {
    let mut pipeline = SigningPipeline::new(samples::REMOTE_DECRYPT, metadata());
    let mut handle = intercept(&mut pipeline).map_err(step("intercept"))?;
    let plan = patch.apply_to_bytes(handle.image_bytes_mut()).map_err(step("patch"))?;
    handle.resume();
    let _ = writeln!(text, "[1] signer pipeline suspended after compilation");
    if let Some(plan) = plan {
        let _ = writeln!(
            text,
            "[2] patch applied: hook at {:#06x}, {} fragment(s), {} bytes of free space used",
            plan.hook_site,
            plan.fragments.len(),
            plan.bytes_used()
        );
    }
    let key = bundled_key(key_index);
    let bundle = pipeline.sign_single_step(&key).map_err(step("sign"))?;
    let _ = writeln!(
        text,
        "[3] pipeline resumed; signed with bundled key #{key_index}, measurement {}",
        bundle.material.measurement
    );
    let loaded = verify_and_load(&bundle);
    let _ = writeln!(
        text,
        "[4] verify_and_load: {}",
        match &loaded {
            Ok(_) => "PASS (measurement and signature check out)".to_string(),
            Err(e) => format!("REJECTED {e}"),
        }
    );
    loaded.map_err(step("load"))
}

fn attack_leak(s: &Scenario) -> Result<Report, ScenarioError> {
    let stack_bytes: u16 = s.param("stack_bytes", 32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let key_index = rng.gen_range(0..2);
    let secret_a: u32 = rng.gen();
    let secret_b: u32 = rng.gen();
    let flag_offset = (4 + u32::from(stack_bytes)).next_multiple_of(4);
    let spec =
        LeakPatchSpec::new(remote_decrypt::STATUS, stack_bytes, flag_offset as u16).map_err(step("leak spec"))?;
    let original = assemble(samples::REMOTE_DECRYPT).expect("bundled sample").image;
    let (_, hook) = make_leak_patch(&original, &spec).map_err(step("leak payload"))?;

    let mut text = format!("ATTACK_LEAK seed={} stack_bytes={stack_bytes}\n", s.seed);
    let loaded = patched_and_signed(key_index, &NodePatch::Leak(spec), &mut text)?;

    let out_len = flag_offset + 4;
    let layout = MemoryLayout::default().with_out_buffer(OUT_BUFFER, out_len);
    let mut machine = vm::load(&loaded, layout).map_err(step("vm load"))?;
    machine.watch(hook);
    let agent = UntrustedAgent::leak_reader(OUT_BUFFER, 4 + u32::from(stack_bytes), OUT_BUFFER + flag_offset);
    let args = [OUT_BUFFER, secret_a, secret_b];
    let _ = writeln!(
        text,
        "[5] ecall status(out={OUT_BUFFER:#x}, {secret_a:#010x}, {secret_b:#010x}) with untrusted agent"
    );
    let t = run_with_agent(
        &mut machine,
        EcallRequest {
            index: remote_decrypt::STATUS,
            args: &args,
        },
        &agent,
        DEFAULT_STEP_BUDGET,
    );
    text += &t.render();

    let leaked = t.reads().next().map(|(_, b)| b.to_vec()).unwrap_or_default();
    let marker_ok = leaked.len() == 4 + stack_bytes as usize && leaked[..4] == MARKER;
    let snapshot_ok = t
        .snapshots
        .first()
        .is_some_and(|snap| marker_ok && leaked[4..] == snap.frame[..stack_bytes as usize]);
    let completed = matches!(t.outcome, Outcome::Completed(_));
    let passed = marker_ok && snapshot_ok && completed;
    let _ = writeln!(text, "marker present: {}", verdict(marker_ok));
    let _ = writeln!(text, "leak equals hook-time frame: {}", verdict(snapshot_ok));
    let _ = writeln!(text, "verdict: {}", verdict(passed));
    Ok(Report {
        name: s.name,
        json: json!({
            "scenario": s.name.as_str(),
            "seed": s.seed,
            "verified": true,
            "leaked_hex": hex::encode(&leaked),
            "marker_present": marker_ok,
            "matches_snapshot": snapshot_ok,
            "steps": t.steps,
            "passed": passed,
        }),
        text,
        passed,
    })
}

/// Runs `decrypt` over the sample's ciphertext and returns the out-buffer.
fn decrypt_run(loaded_image: &enclave_supply_core::format::EnclaveImage) -> Result<Vec<u8>, ScenarioError> {
    let plain = remote_decrypt::PLAINTEXT;
    let mut block = plain.to_vec();
    block.resize(remote_decrypt::BLOCK_LEN, 0);
    let cipher = xor_stream(&remote_decrypt::SESSION_KEY, &block);
    let mut m = vm::VmState::from_image(loaded_image, MemoryLayout::default()).map_err(step("vm load"))?;
    m.write_untrusted(CIPHER_BUFFER, &cipher).map_err(step("vm write"))?;
    m.ecall(
        remote_decrypt::DECRYPT,
        &[OUT_BUFFER, CIPHER_BUFFER, plain.len() as u32],
    )
    .map_err(step("decrypt"))?;
    Ok(m.read_untrusted(OUT_BUFFER, plain.len() as u32)
        .map_err(step("vm read"))?
        .to_vec())
}

fn attack_tamper(s: &Scenario) -> Result<Report, ScenarioError> {
    let needle: String = s.param("needle", "John".to_string())?;
    let replacement: String = s.param("replacement", "Lary".to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let key_index = rng.gen_range(0..2);
    let spec = TamperPatchSpec::new(
        remote_decrypt::DECRYPT,
        needle.as_bytes(),
        replacement.as_bytes(),
        remote_decrypt::PLAINTEXT.len() as u32,
    )
    .map_err(step("tamper spec"))?;
    let original = assemble(samples::REMOTE_DECRYPT).expect("bundled sample").image;
    make_tamper_patch(&original, &spec).map_err(step("tamper payload"))?;

    let mut text = format!("ATTACK_TAMPER seed={} {needle:?} -> {replacement:?}\n", s.seed);
    let before = decrypt_run(&original)?;
    let loaded = patched_and_signed(key_index, &NodePatch::Tamper(spec), &mut text)?;
    let after = decrypt_run(&loaded.image)?;

    let _ = writeln!(text, "decrypted buffer, genuine enclave:");
    text += &hexdump(OUT_BUFFER, &before);
    let _ = writeln!(text, "decrypted buffer, patched enclave:");
    text += &hexdump(OUT_BUFFER, &after);
    let diff: Vec<usize> = (0..before.len()).filter(|i| before[*i] != after[*i]).collect();
    let _ = writeln!(text, "differing offsets: {diff:?}");
    let _ = writeln!(text, "before: {}", String::from_utf8_lossy(&before));
    let _ = writeln!(text, "after:  {}", String::from_utf8_lossy(&after));

    let expected: Vec<u8> = String::from_utf8_lossy(&before)
        .replacen(&needle, &replacement, 1)
        .into_bytes();
    let passed = after == expected && before == remote_decrypt::PLAINTEXT && diff.len() <= needle.len();
    let _ = writeln!(text, "verdict: {}", verdict(passed));
    Ok(Report {
        name: s.name,
        json: json!({
            "scenario": s.name.as_str(),
            "seed": s.seed,
            "verified": true,
            "before": String::from_utf8_lossy(&before),
            "after": String::from_utf8_lossy(&after),
            "differing_offsets": diff,
            "passed": passed,
        }),
        text,
        passed,
    })
}

/// Flips one bit of every encrypted request in flight.
struct RequestFlipper;

impl ChannelAdversary for RequestFlipper {
    fn on_request(&mut self, frame: &mut Vec<u8>) {
        frame[0] ^= 1;
    }
}

struct ResponseFlipper;

impl ChannelAdversary for ResponseFlipper {
    fn on_response(&mut self, frame: &mut Vec<u8>) {
        let n = frame.len();
        frame[n / 2] ^= 0x80;
    }
}

fn mitigate_central(s: &Scenario) -> Result<Report, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let platform = platform_for_seed(s.seed);
    let manifest = BuilderManifest::current();
    let expected = manifest.measurement();
    let key_index = rng.gen_range(0..2);
    let key = key_der(["bundled:isv-alpha", "bundled:isv-beta"][key_index]).expect("bundled");
    let mut text = format!("MITIGATE_CENTRAL seed={}\nbuilder measurement {expected}\n", s.seed);
    let mut rows = Vec::new();
    let mut all_ok = true;

    let stale = BuilderManifest {
        module_version: "0.0.1".into(),
        ..manifest.clone()
    };
    let mut builder = AtomicBuilder::new(manifest.clone(), platform.clone(), rng.gen());
    let stale_check = establish_channel(&platform, &mut builder, "isv", stale.measurement(), &mut rng);
    let stale_ok = matches!(stale_check, Err(ChannelError::AttestationMismatch { .. }));
    let _ = writeln!(
        text,
        "expecting an older builder: {}",
        if stale_ok { "AttestationMismatch" } else { "UNEXPECTED" }
    );
    all_ok &= stale_ok;

    for (name, src) in samples::SAMPLES {
        let mut builder = AtomicBuilder::new(manifest.clone(), platform.clone(), rng.gen());
        let hardened = matches!(intercept(&mut builder), Err(InterceptError::PipelineHardened));
        let mut channel =
            establish_channel(&platform, &mut builder, "isv", expected, &mut rng).map_err(step("channel"))?;
        let request = BuildRequest {
            source: src.to_string(),
            metadata: metadata(),
            private_key: key.clone(),
        };
        let bundle =
            build_and_sign_atomic(&mut channel, &mut builder, &request, &mut Passive).map_err(step("build"))?;
        let recomputed = isv_recompute(src);
        let measurement_ok = recomputed == Some(bundle.material.measurement);
        let loads = verify_and_load(&bundle).is_ok();

        let offset = rng.gen_range(0..bundle.image_bytes.len());
        let flipped = adversary_post_hook_tamper(&bundle, &Mutation::FlipByte { offset, mask: 0x01 });
        let flip_rejected = matches!(verify_and_load(&flipped), Err(LoadError::MeasurementMismatch { .. }));
        let rewired = adversary_post_hook_tamper(&bundle, &Mutation::RewriteEcallEntry { index: 0, target: 0 });
        let rewire_rejected = matches!(verify_and_load(&rewired), Err(LoadError::MeasurementMismatch { .. }));

        let req_mac = matches!(
            build_and_sign_atomic(&mut channel, &mut builder, &request, &mut RequestFlipper),
            Err(CentralError::Builder(_))
        );
        // The rejected request consumed nothing; open a fresh channel for the response test.
        let mut channel =
            establish_channel(&platform, &mut builder, "isv", expected, &mut rng).map_err(step("channel"))?;
        let resp_mac = matches!(
            build_and_sign_atomic(&mut channel, &mut builder, &request, &mut ResponseFlipper),
            Err(CentralError::Channel(ChannelError::Mac))
        );

        let ok = hardened && measurement_ok && loads && flip_rejected && rewire_rejected && req_mac && resp_mac;
        all_ok &= ok;
        let _ = writeln!(text, "sample {name}:");
        let _ = writeln!(
            text,
            "  intercept attempt: {}",
            if hardened { "PipelineHardened" } else { "EXPOSED" }
        );
        let _ = writeln!(
            text,
            "  ISV recomputed measurement matches signed material: {}",
            verdict(measurement_ok)
        );
        let _ = writeln!(text, "  response bundle loads: {}", verdict(loads));
        let _ = writeln!(
            text,
            "  post-response flip at byte {offset}: {}",
            if flip_rejected {
                "MeasurementMismatch"
            } else {
                "ACCEPTED"
            }
        );
        let _ = writeln!(
            text,
            "  post-response ecall-table rewrite: {}",
            if rewire_rejected {
                "MeasurementMismatch"
            } else {
                "ACCEPTED"
            }
        );
        let _ = writeln!(
            text,
            "  tampered request: {}",
            if req_mac { "MAC failure, no output" } else { "ACCEPTED" }
        );
        let _ = writeln!(
            text,
            "  tampered response: {}",
            if resp_mac { "MAC failure at ISV" } else { "ACCEPTED" }
        );
        rows.push(json!({
            "sample": name,
            "pipeline_hardened": hardened,
            "measurement_matches": measurement_ok,
            "loads": loads,
            "post_flip_rejected": flip_rejected,
            "ecall_rewrite_rejected": rewire_rejected,
            "request_mac_failure": req_mac,
            "response_mac_failure": resp_mac,
        }));
    }
    let _ = writeln!(text, "verdict: {}", verdict(all_ok));
    Ok(Report {
        name: s.name,
        json: json!({
            "scenario": s.name.as_str(),
            "seed": s.seed,
            "builder_measurement": expected.to_string(),
            "stale_builder_rejected": stale_ok,
            "samples": rows,
            "passed": all_ok,
        }),
        text,
        passed: all_ok,
    })
}

fn mitigate_distributed(s: &Scenario) -> Result<Report, ScenarioError> {
    let mode = match s.param("mode", "full".to_string())?.as_str() {
        "full" => SubmissionMode::FullMaterial,
        "hash" => SubmissionMode::HashOnly,
        other => {
            return Err(ScenarioError::BadParam {
                key: "mode".into(),
                value: other.into(),
            })
        }
    };
    let cfg = DistConfig {
        nodes: s.param("nodes", 10)?,
        adversaries: s.param("adversaries", 1)?,
        mode,
        ambient_load: s.param("lambda", 0.0)?,
        seed: s.seed,
        gas: Default::default(),
    };
    let report = run_dist_sim(&cfg).map_err(step("dist-sim"))?;
    Ok(Report {
        name: s.name,
        text: format!("MITIGATE_DISTRIBUTED seed={}\n{}", s.seed, report.render()),
        json: json!({ "scenario": s.name.as_str(), "seed": s.seed, "report": report.to_json(), "passed": report.verdict_holds }),
        passed: report.verdict_holds,
    })
}
