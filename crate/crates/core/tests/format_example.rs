//! The worked example in FORMAT.md, byte for byte.

use pd4g::asset::{AnchorSet, DeformationTable, GlobalField, LayerId, LocalField, MaskBank};
use pd4g::bitstream::{decode_prefix, encode, manifest, EncodeConfig, Header};

const HEADER_HEX: &str = "
50 44 34 47 01 06 02 01 02 00 00 00 01 00 02 00
00 00 00 00 00 00 30 3f 00 00 00 00 00 00 b0 3f
00 00 00 00 00 00 b0 3f 00 00 00 00 00 00 b0 3f
10 10 10 10 10 10 70 3f 10 10 10 10 10 10 70 3f
00 00 00 00 00 00 50 3f 00 00 00 00 00 00 90 3f
00 00 00 00 00 00 50 3f 03 00 54 00 00 00 21 00
00 00 a4 10 38 a6 01 54 00 00 00 31 00 00 00 b1
e0 0c 62 02 5c 00 00 00 61 00 00 00 2d a1 ec 05";

fn example() -> Vec<u8> {
    let anchors = AnchorSet::new(
        2,
        1,
        vec![0.25, 0.5, 0.75, 0.5],
        vec![0.5, -0.25],
        vec![0.125, 0.0625],
        vec![0.0, 0.0, 0.0625, 0.0],
        vec![1.0, 0.5],
        vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
    )
    .unwrap();
    let bank = MaskBank::new([vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]], 0.01).unwrap();
    let global = GlobalField {
        displacements: vec![0.0, 0.0, 0.0, 0.0, 0.0078125, 0.0, 0.0, 0.0],
        feature_residuals: vec![0.0, 0.0, 0.015625, 0.0],
    };
    let local = LocalField {
        d_mu: vec![0.0; 8],
        d_sigma: vec![0.0, 0.0, 0.0, 0.0009765625],
        d_alpha: vec![0.0; 4],
        d_color: vec![[0.0; 3]; 4],
    };
    let defs = DeformationTable::new(2, 2, 1, vec![0.0, 1.0], Some(global), Some(local)).unwrap();
    encode(&anchors, &bank, &defs, &EncodeConfig::default()).unwrap()
}

#[test]
fn header_and_sizes_match_the_document() {
    let bytes = example();
    let want: Vec<u8> = HEADER_HEX.split_whitespace().map(|h| u8::from_str_radix(h, 16).unwrap()).collect();
    assert_eq!(&bytes[..128], &want[..]);
    assert_eq!(Header::parse(&bytes).unwrap().len(), 128);

    let m = manifest(&bytes).unwrap();
    assert_eq!(m.layer_bytes, vec![84, 84, 92]);
    assert_eq!(m.raw_bytes, vec![33, 49, 97]);
    assert_eq!(m.cumulative_bytes, vec![212, 296, 388]);
    assert_eq!(m.checksums, vec![2788692132, 1645011121, 99393837]);
}

#[test]
fn decoded_example_has_binary_masks() {
    let model = decode_prefix(&example()).unwrap();
    assert_eq!(model.anchor_ids, vec![0, 1]);
    assert_eq!(model.masks.level(LayerId::STATIC), &[1.0, 0.0]);
    assert_eq!(model.masks.level(LayerId::GLOBAL), &[1.0, 0.0]);
    assert_eq!(model.masks.level(LayerId::LOCAL), &[1.0, 1.0]);
    assert_eq!(model.anchors.opacities(), &[1.0, 128.0 / 255.0]);
    let local = model.deformations.local().unwrap();
    assert_eq!(local.d_sigma, vec![0.0, 0.0, 0.0, 1.0 / 1024.0]);
}
