use enclave_supply_core::format::{
    assemble, find_free_chunks, locate_ecall_table, EnclaveImage, FormatError, FreeChunk,
};
use enclave_supply_core::samples;
use enclave_supply_core::signing::{
    append_signature, bundled_key, generate_signing_material, measure, sign_material, sign_single_step,
    verify_and_load, LoadError, VendorMetadata,
};
use proptest::prelude::*;

fn arb_image() -> impl Strategy<Value = EnclaveImage> {
    (
        1usize..48,
        any::<u16>(),
        proptest::collection::vec(prop_oneof![Just(0x00u8), Just(0xFF), any::<u8>()], 0..384),
        proptest::collection::vec(any::<u8>(), 0..64),
        proptest::collection::vec(any::<u8>(), 0..64),
        proptest::collection::vec(any::<u8>(), 0..32),
        any::<u32>(),
    )
        .prop_map(|(slots, sdk, code_bytes, rodata, rwdata, meta, entry_pick)| {
            let mut code = code_bytes;
            code.resize(slots * 8, 0x13);
            let entry = (entry_pick % slots as u32) * 8;
            EnclaveImage::new(sdk, entry, code, rodata, rwdata, meta).unwrap()
        })
}

/// Brute-force scan: every maximal run of 0x00 or 0xFF bytes of length at
/// least 8, minus runs touching the entry slot.
fn brute_force_chunks(img: &EnclaveImage) -> Vec<(u32, u32, u8)> {
    let code = img.code();
    let entry = img.entry_offset() as usize;
    let mut out = Vec::new();
    let mut i = 0;
    while i < code.len() {
        let b = code[i];
        let mut j = i;
        while j < code.len() && code[j] == b {
            j += 1;
        }
        let touches_entry = i < entry + 8 && entry < j;
        if (b == 0 || b == 0xFF) && j - i >= 8 && !touches_entry {
            out.push((i as u32, (j - i) as u32, b));
        }
        i = j;
    }
    out
}

fn chunk_triples(chunks: &[FreeChunk]) -> Vec<(u32, u32, u8)> {
    chunks
        .iter()
        .map(|c| (c.code_offset, c.length, c.fill.byte()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_serialize_round_trip(img in arb_image()) {
        let bytes = img.serialize().unwrap();
        let back = EnclaveImage::parse(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(back.serialize().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn free_chunks_match_brute_force(img in arb_image()) {
        prop_assert_eq!(chunk_triples(&find_free_chunks(&img)), brute_force_chunks(&img));
    }

    #[test]
    fn arbitrary_bytes_either_error_or_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        if let Ok(img) = EnclaveImage::parse(&bytes) {
            prop_assert_eq!(img.serialize().unwrap(), bytes);
        }
    }

    #[test]
    fn mutated_header_round_trips_or_errors(img in arb_image(), at in 0usize..13, v in any::<u8>()) {
        let mut bytes = img.serialize().unwrap();
        bytes[at] = v;
        if let Ok(back) = EnclaveImage::parse(&bytes) {
            prop_assert_eq!(back.serialize().unwrap(), bytes);
        }
    }
}

#[test]
fn discovery_matches_symbol_map_on_generated_programs() {
    for seed in 0..1000 {
        let g = samples::generate_program(seed);
        let asm = assemble(&g.source).unwrap();
        let found = locate_ecall_table(&asm.image).unwrap();
        let expected: Vec<u32> = asm.symbols.ecalls.iter().map(|e| e.function_offset).collect();
        assert_eq!(found.functions, expected, "seed {seed}");
        assert_eq!(found.table.count as usize, g.ecall_count);
        assert_eq!(found.table.rodata_offset, asm.symbols.table_offset);
    }
}

#[test]
fn worked_example_chunks() {
    let mut code = vec![0x01, 1, 0, 0, 0, 0, 0, 0x7f, 0x12, 0, 0, 0, 0, 0, 0, 0x7f];
    code.extend([0u8; 24]);
    code.extend([0xFFu8; 8]);
    let img = EnclaveImage::new(1, 0, code, vec![], vec![], vec![]).unwrap();
    assert_eq!(chunk_triples(&find_free_chunks(&img)), [(16, 24, 0), (40, 8, 0xFF)]);
}

#[test]
fn parse_rejects_every_strict_prefix_of_samples() {
    for (name, src) in samples::SAMPLES {
        let bytes = assemble(src).unwrap().image.serialize().unwrap();
        for n in 0..bytes.len() {
            assert!(EnclaveImage::parse(&bytes[..n]).is_err(), "{name} prefix {n}");
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(EnclaveImage::parse(&bad), Err(FormatError::BadMagic(*b"XXXX")));
    }
}

#[test]
fn every_single_byte_flip_changes_measurement() {
    let img = assemble(samples::MINIMAL).unwrap().image;
    let bytes = img.serialize().unwrap();
    assert!(bytes.len() <= 256);
    let base = measure(&img).unwrap();
    for i in 0..bytes.len() {
        for x in 1..=255u8 {
            let mut b = bytes.clone();
            b[i] ^= x;
            let h = enclave_supply_core::signing::MeasurementHash::of_bytes(&b);
            assert_ne!(h, base, "byte {i} xor {x:#x}");
        }
    }
}

#[test]
fn material_bit_flips_break_signature() {
    let img = assemble(samples::REMOTE_DECRYPT).unwrap().image;
    let key = bundled_key(0);
    let material = generate_signing_material(&img, VendorMetadata::default()).unwrap();
    let sig = sign_material(&material, &key).unwrap();
    assert!(sig.verifies(&material));
    assert_eq!(sig.rsa_signature.len(), 384);
    let bytes = material.to_bytes();
    for bit in 0..512 {
        let mut b = bytes;
        b[bit / 8] ^= 1 << (bit % 8);
        let m = enclave_supply_core::signing::SigningMaterial::from_bytes(&b);
        assert!(!sig.verifies(&m), "bit {bit}");
    }
}

#[test]
fn single_step_equals_two_step() {
    let meta = VendorMetadata {
        vendor_id: VendorMetadata::vendor_from_label("acme"),
        date: 20_190_611,
        attributes: 0x4,
        version: 3,
    };
    let key = bundled_key(1);
    for (_, src) in samples::SAMPLES {
        let img = assemble(src).unwrap().image;
        let one = sign_single_step(&img, meta, &key).unwrap();
        let material = generate_signing_material(&img, meta).unwrap();
        let two = append_signature(
            img.serialize().unwrap(),
            material,
            sign_material(&material, &key).unwrap(),
        );
        assert_eq!(one, two);
        assert_eq!(verify_and_load(&one).unwrap().measurement, material.measurement);
    }
}

#[test]
fn wrong_key_is_bad_signature() {
    let img = assemble(samples::MINIMAL).unwrap().image;
    let a = sign_single_step(&img, VendorMetadata::default(), &bundled_key(0)).unwrap();
    let b = sign_single_step(&img, VendorMetadata::default(), &bundled_key(1)).unwrap();
    let mixed = append_signature(
        a.image_bytes.clone(),
        a.material,
        enclave_supply_core::signing::EnclaveSignature {
            public_key: b.signature.public_key,
            ..a.signature
        },
    );
    assert_eq!(verify_and_load(&mixed), Err(LoadError::BadSignature));
}
