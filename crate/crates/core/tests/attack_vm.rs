use enclave_supply_core::attack::{
    apply_patch, intercept, make_leak_patch, make_tamper_patch, patch_image, plan_patch, touched_ranges, LeakPatchSpec,
    NodePatch, PatchError, PatchPayload, PayloadError, SigningPipeline, TamperPatchSpec, MARKER,
};
use enclave_supply_core::format::{assemble, find_free_chunks, locate_ecall_table, EnclaveImage, Instruction};
use enclave_supply_core::samples::{self, remote_decrypt, xor_stream};
use enclave_supply_core::signing::{bundled_key, verify_and_load, LoadError, VendorMetadata};
use enclave_supply_core::vm::{
    run_with_agent, EcallRequest, MemoryLayout, Outcome, UntrustedAgent, VmError, VmState, DEFAULT_STEP_BUDGET,
};

const OUT: u32 = 0x1000;
const CIPHER: u32 = 0x2000;

fn image(src: &str) -> EnclaveImage {
    assemble(src).unwrap().image
}

fn cipher_block(plain: &[u8]) -> Vec<u8> {
    let mut block = plain.to_vec();
    block.resize(remote_decrypt::BLOCK_LEN, 0);
    xor_stream(&remote_decrypt::SESSION_KEY, &block)
}

/// Runs `decrypt` on the sample plaintext and returns the out-buffer.
fn run_decrypt(img: &EnclaveImage) -> Vec<u8> {
    let plain = remote_decrypt::PLAINTEXT;
    let mut vm = VmState::from_image(img, MemoryLayout::default()).unwrap();
    vm.write_untrusted(CIPHER, &cipher_block(plain)).unwrap();
    vm.ecall(remote_decrypt::DECRYPT, &[OUT, CIPHER, plain.len() as u32])
        .unwrap();
    vm.read_untrusted(OUT, plain.len() as u32).unwrap().to_vec()
}

#[test]
fn decrypt_matches_reference_cipher() {
    let img = image(samples::REMOTE_DECRYPT);
    // Oracle: XOR the ciphertext with the key outside the VM.
    let block = cipher_block(remote_decrypt::PLAINTEXT);
    let reference = xor_stream(&remote_decrypt::SESSION_KEY, &block);
    assert_eq!(run_decrypt(&img), &reference[..remote_decrypt::PLAINTEXT.len()]);
    assert_eq!(run_decrypt(&img), remote_decrypt::PLAINTEXT);
}

#[test]
fn tamper_replaces_john_with_lary() {
    let img = image(samples::REMOTE_DECRYPT);
    let spec = TamperPatchSpec::new(remote_decrypt::DECRYPT, b"John", b"Lary", 25).unwrap();
    let (payload, hook) = make_tamper_patch(&img, &spec).unwrap();
    let (patched, plan) = patch_image(&img, &payload, hook).unwrap();
    assert_eq!(plan.fragments.len(), 2, "tamper payload is split across both chunks");
    assert_eq!(run_decrypt(&patched), b"Lary;892157932877159;$100");
}

#[test]
fn tamper_without_needle_leaves_buffer() {
    let img = image(samples::REMOTE_DECRYPT);
    let spec = TamperPatchSpec::new(remote_decrypt::DECRYPT, b"Mary", b"Lary", 25).unwrap();
    let (payload, hook) = make_tamper_patch(&img, &spec).unwrap();
    let (patched, _) = patch_image(&img, &payload, hook).unwrap();
    assert_eq!(run_decrypt(&patched), remote_decrypt::PLAINTEXT);
}

#[test]
fn tamper_spec_errors() {
    assert!(matches!(
        TamperPatchSpec::new(0, b"John", b"Larry", 25),
        Err(PayloadError::LengthMismatch { .. })
    ));
    let img = image(samples::REMOTE_DECRYPT);
    let spec = TamperPatchSpec::new(remote_decrypt::DECRYPT, b"John", b"Lary", 3).unwrap();
    assert!(matches!(
        make_tamper_patch(&img, &spec),
        Err(PayloadError::NeedleLongerThanBuffer { .. })
    ));
}

fn leak_setup() -> (EnclaveImage, EnclaveImage, u32, LeakPatchSpec) {
    let img = image(samples::REMOTE_DECRYPT);
    let spec = LeakPatchSpec::new(remote_decrypt::STATUS, 32, 48).unwrap();
    let (payload, hook) = make_leak_patch(&img, &spec).unwrap();
    let (patched, _) = patch_image(&img, &payload, hook).unwrap();
    (img, patched, hook, spec)
}

#[test]
fn leak_copies_frame_after_marker() {
    let (_, patched, hook, spec) = leak_setup();
    let mut vm = VmState::from_image(&patched, MemoryLayout::default().with_out_buffer(OUT, 64)).unwrap();
    vm.watch(hook);
    let agent = UntrustedAgent::leak_reader(OUT, 4 + spec.stack_bytes as u32, OUT + 48);
    let args = [OUT, 0xAABB_CCDD, 0x1122_3344];
    let t = run_with_agent(
        &mut vm,
        EcallRequest {
            index: remote_decrypt::STATUS,
            args: &args,
        },
        &agent,
        DEFAULT_STEP_BUDGET,
    );
    assert!(matches!(t.outcome, Outcome::Completed(_)), "{:?}", t.outcome);
    let (_, leaked) = t.reads().next().expect("agent read the buffer");
    assert_eq!(&leaked[..4], &MARKER);
    // Oracle: frame snapshot taken by the harness when the hook pc was reached.
    let snap = &t.snapshots[0];
    assert_eq!(&leaked[4..], &snap.frame[..32]);
    assert_eq!(&leaked[4..8], &OUT.to_le_bytes());
    assert_eq!(&leaked[8..12], &0xAABB_CCDDu32.to_le_bytes());
    assert_eq!(&leaked[12..16], &0x1122_3344u32.to_le_bytes());

    // Deterministic schedule.
    let mut again = VmState::from_image(&patched, MemoryLayout::default().with_out_buffer(OUT, 64)).unwrap();
    again.watch(hook);
    let t2 = run_with_agent(
        &mut again,
        EcallRequest {
            index: remote_decrypt::STATUS,
            args: &args,
        },
        &agent,
        DEFAULT_STEP_BUDGET,
    );
    assert_eq!(t, t2);
}

#[test]
fn unpatched_status_shows_no_marker() {
    let (img, _, _, spec) = leak_setup();
    let mut vm = VmState::from_image(&img, MemoryLayout::default()).unwrap();
    let agent = UntrustedAgent::leak_reader(OUT, 4 + spec.stack_bytes as u32, OUT + 48);
    let t = run_with_agent(
        &mut vm,
        EcallRequest {
            index: remote_decrypt::STATUS,
            args: &[OUT, 1, 2],
        },
        &agent,
        DEFAULT_STEP_BUDGET,
    );
    assert!(matches!(t.outcome, Outcome::Completed(_)));
    assert_eq!(t.reads().count(), 0);
    assert_ne!(t.untrusted_bytes(OUT, 4).unwrap(), &MARKER);
}

#[test]
fn leak_without_agent_deadlocks() {
    let (_, patched, _, _) = leak_setup();
    let mut vm = VmState::from_image(&patched, MemoryLayout::default()).unwrap();
    let t = run_with_agent(
        &mut vm,
        EcallRequest {
            index: remote_decrypt::STATUS,
            args: &[OUT, 1, 2],
        },
        &UntrustedAgent::default(),
        DEFAULT_STEP_BUDGET,
    );
    assert_eq!(t.outcome, Outcome::Failed(VmError::Deadlock(DEFAULT_STEP_BUDGET)));
}

#[test]
fn value_only_ecall_has_no_leak_vector() {
    let src = ".entry e\n.ecall f val val\ne:\n CALL d\n RET\nd:\n CALLIND r0, @ecall_table\n RET\nf:\n LOADI r0, 1\n RET\n HALT\n .freespace 256 00\n";
    let spec = LeakPatchSpec::new(0, 16, 20).unwrap();
    assert_eq!(
        make_leak_patch(&image(src), &spec),
        Err(PayloadError::NoUntrustedPointerArg)
    );
}

#[test]
fn apply_touches_only_planned_ranges() {
    let (img, patched, _, spec) = leak_setup();
    let (payload, hook) = make_leak_patch(&img, &spec).unwrap();
    let plan = plan_patch(&img, &payload, hook).unwrap();
    let ranges = touched_ranges(&plan);
    let (a, b) = (img.code(), patched.code());
    assert_eq!(a.len(), b.len());
    for i in 0..a.len() as u32 {
        let inside = ranges.iter().any(|(s, e)| *s <= i && i < *e);
        if !inside {
            assert_eq!(a[i as usize], b[i as usize], "byte {i:#x} changed outside the plan");
        }
    }
    assert_eq!(img.rodata(), patched.rodata());
    assert_eq!(img.rwdata(), patched.rwdata());
    assert_eq!(img.meta(), patched.meta());
}

#[test]
fn leaked_enclave_signs_and_verifies_when_patched_pre_material() {
    let key = bundled_key(0);
    let meta = VendorMetadata::default();
    let spec = LeakPatchSpec::new(remote_decrypt::STATUS, 32, 48).unwrap();

    let mut pipeline = SigningPipeline::new(samples::REMOTE_DECRYPT, meta);
    let mut handle = intercept(&mut pipeline).unwrap();
    NodePatch::Leak(spec).apply_to_bytes(handle.image_bytes_mut()).unwrap();
    handle.resume();
    let bundle = pipeline.sign_single_step(&key).unwrap();
    let loaded = verify_and_load(&bundle).expect("patched-before-material bundle is accepted");
    assert_ne!(loaded.image, image(samples::REMOTE_DECRYPT));

    let mut after = bundle.clone();
    after.image_bytes[40] ^= 0x80;
    assert!(matches!(
        verify_and_load(&after),
        Err(LoadError::MeasurementMismatch { .. })
    ));
}

/// Noop trampoline on every ecall entry: same result, same memory.
fn assert_noop_transparent(img: &EnclaveImage, arities: &[usize]) {
    let found = locate_ecall_table(img).unwrap();
    for (idx, &function) in found.functions.iter().enumerate() {
        let saved = Instruction::fetch(img.code(), function).unwrap();
        let patched = match plan_patch(img, &PatchPayload::noop(saved), function) {
            Ok(plan) => apply_patch(img, &plan).unwrap(),
            Err(PatchError::InsufficientFreeSpace { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        let args: Vec<u32> = (0..arities[idx]).map(|i| 0x3000 + 0x100 * i as u32).collect();
        let run = |image: &EnclaveImage| {
            let mut vm = VmState::from_image(image, MemoryLayout::default()).unwrap();
            for (i, a) in args.iter().enumerate() {
                vm.write_untrusted(*a, &[i as u8 + 1; 16]).unwrap();
            }
            let r = vm.ecall(idx as u16, &args).map(|c| (c.return_value, c.halted));
            let rw = vm
                .debug_read_enclave(vm.sections.rwdata, image.rwdata().len() as u32)
                .unwrap()
                .to_vec();
            (r, vm.untrusted_memory().to_vec(), rw)
        };
        assert_eq!(run(img), run(&patched), "ecall {idx}");
    }
}

#[test]
fn noop_trampoline_is_transparent_on_samples_and_generated() {
    for (_, src) in samples::SAMPLES {
        let img = image(src);
        let n = locate_ecall_table(&img).unwrap().functions.len();
        assert_noop_transparent(&img, &vec![3; n]);
    }
    for seed in 0..200 {
        let g = samples::generate_program(seed);
        let img = image(&g.source);
        assert!(!find_free_chunks(&img).is_empty());
        assert_noop_transparent(&img, &g.arities);
    }
}
