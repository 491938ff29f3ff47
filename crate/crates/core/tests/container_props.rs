//! Container invariants over random scenes, masks and byte prefixes.

use pd4g::bitstream::{decode_prefix, encode, manifest, EncodeConfig};
use pd4g::error::Error;
use pd4g::verify::{check_round_trip, random_container_inputs};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn any_prefix_decodes_to_its_complete_chunks(k in 0u64..10_000, cut in 0.0f64..=1.0) {
        let (anchors, bank, defs) = random_container_inputs(k).unwrap();
        let cfg = EncodeConfig::default();
        let bytes = encode(&anchors, &bank, &defs, &cfg).unwrap();
        let m = manifest(&bytes).unwrap();
        let len = (cut * bytes.len() as f64).round() as usize;
        let complete = m.cumulative_bytes.iter().filter(|c| **c as usize <= len).count();
        match decode_prefix(&bytes[..len]) {
            Ok(model) => {
                prop_assert_eq!(model.max_level.index() + 1, complete);
                check_round_trip(&anchors, &bank, &defs, &cfg.quant, &model).map_err(TestCaseError::fail)?;
            }
            Err(e) => {
                prop_assert_eq!(complete, 0, "prefix of {} bytes failed: {}", len, e);
                let is_insufficient = matches!(e, Error::InsufficientData(_));
                prop_assert!(is_insufficient, "{}", e);
            }
        }
    }

    #[test]
    fn flipped_chunk_byte_is_caught(k in 0u64..10_000, at in 0.0f64..1.0) {
        let (anchors, bank, defs) = random_container_inputs(k).unwrap();
        let mut bytes = encode(&anchors, &bank, &defs, &EncodeConfig::default()).unwrap();
        let m = manifest(&bytes).unwrap();
        let start = m.header_bytes as usize;
        let i = start + ((bytes.len() - start) as f64 * at) as usize;
        bytes[i] ^= 0x40;
        let layer = m.cumulative_bytes.iter().position(|c| i < *c as usize).unwrap();
        match decode_prefix(&bytes) {
            Err(Error::Integrity { layer: l, .. }) => prop_assert_eq!(l as usize, layer),
            Err(Error::Format(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {}", e),
            Ok(model) => prop_assert!(model.max_level.index() < layer, "corrupted layer {} decoded", layer),
        }
    }
}
