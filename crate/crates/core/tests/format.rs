mod common;

use proptest::prelude::*;

use common::{batch_for, random_chain, rng};
use resfuse::graph::format::{decode, encode, load, save, FormatError, MODEL_FILE, WEIGHTS_FILE};
use resfuse::graph::{build_reference, Arch, Mode, ModelGraph, FORMAT_VERSION};
use resfuse::surgery::convert_to_resconv;

fn bits(g: &ModelGraph) -> Vec<Vec<u32>> {
    g.param_ids().into_iter().map(|id| g.param(id).unwrap().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn vgg_round_trips_bit_exactly() {
    let g = build_reference(Arch::Vgg16Cifar, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&g, dir.path()).unwrap();
    let back = load(dir.path()).unwrap();
    assert_eq!(back, g);
    assert_eq!(bits(&back), bits(&g));
    let json = std::fs::read(dir.path().join(MODEL_FILE)).unwrap();
    let bin = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
    let (json2, bin2) = encode(&back).unwrap();
    assert_eq!(json2.as_bytes(), &json[..]);
    assert_eq!(bin2, bin);
}

#[test]
fn converted_graph_round_trips_and_runs_identically() {
    let g = convert_to_resconv(&build_reference(Arch::Resnet56Cifar, 1).unwrap()).unwrap();
    let (json, bin) = encode(&g).unwrap();
    let back = decode(&json, &bin).unwrap();
    assert_eq!(back, g);
    let x = common::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut rng(2));
    let (a, b) = (g.forward(&x, Mode::Infer).unwrap(), back.forward(&x, Mode::Infer).unwrap());
    assert_eq!(a.data(), b.data());
}

#[test]
fn counting_graphs_with_residual_nodes_round_trip() {
    for arch in [Arch::Resnet50Imagenet, Arch::MobilenetCifar] {
        let g = build_reference(arch, 0).unwrap();
        let (json, bin) = encode(&g).unwrap();
        assert_eq!(decode(&json, &bin).unwrap(), g);
    }
}

#[test]
fn empty_chain_round_trips() {
    let g = ModelGraph::new("empty", vec![3, 4, 4], vec![]);
    let (json, bin) = encode(&g).unwrap();
    assert_eq!(bin.len(), 16);
    assert_eq!(decode(&json, &bin).unwrap(), g);
}

#[test]
fn truncated_weights_name_the_tensor() {
    let g = build_reference(Arch::Toy { depth: 2, width: 4 }, 0).unwrap();
    let (json, bin) = encode(&g).unwrap();
    let err = decode(&json, &bin[..bin.len() - 40]).unwrap_err();
    match &err {
        FormatError::Truncated { tensor, .. } => assert!(tensor.starts_with("nodes["), "{tensor}"),
        other => panic!("expected truncation, got {other}"),
    }
    assert!(err.to_string().contains("nodes["));
    assert!(matches!(decode(&json, &bin[..6]), Err(FormatError::Magic)));
}

#[test]
fn corruption_and_version_are_detected() {
    let g = build_reference(Arch::Toy { depth: 2, width: 4 }, 0).unwrap();
    let (json, mut bin) = encode(&g).unwrap();
    let mid = bin.len() / 2;
    bin[mid] ^= 0x40;
    assert!(matches!(decode(&json, &bin), Err(FormatError::Checksum { .. })));
    bin[mid] ^= 0x40;
    let other = json.replace(FORMAT_VERSION, "resfuse-v0");
    assert!(matches!(decode(&other, &bin), Err(FormatError::Version { found }) if found == "resfuse-v0"));
    let mut extra = bin.clone();
    extra.splice(extra.len() - 4..extra.len() - 4, [0u8; 4]);
    let crc = crc32fast::hash(&extra[..extra.len() - 4]);
    let n = extra.len();
    extra[n - 4..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(decode(&json, &extra), Err(FormatError::Unreferenced(4))));
    assert!(matches!(decode("{", &bin), Err(FormatError::Json(_))));
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load(&dir.path().join("nope")), Err(FormatError::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_chains_round_trip(seed in 0u64..1_000_000, gates in any::<bool>()) {
        let g = random_chain(&mut rng(seed), gates);
        let (json, bin) = encode(&g).unwrap();
        let back = decode(&json, &bin).unwrap();
        prop_assert_eq!(bits(&back), bits(&g));
        prop_assert_eq!(&back, &g);
        let x = batch_for(&g, 2, &mut rng(seed + 1));
        let (a, b) = (g.forward(&x, Mode::Infer).unwrap(), back.forward(&x, Mode::Infer).unwrap());
        prop_assert_eq!(a.data(), b.data());
        let (json2, bin2) = encode(&back).unwrap();
        prop_assert_eq!(json2, json);
        prop_assert_eq!(bin2, bin);
    }
}
