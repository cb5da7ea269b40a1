use std::fs;
use std::path::Path;

use sqwa::averaging::{average_models, Capture, CaptureBank};
use sqwa::checkpoint::{
    self, capture_dir_name, load, load_bank, save, save_bank, Artifact, Provenance, MANIFEST_FILE,
    PAYLOAD_FILE,
};
use sqwa::data::synthetic_blobs;
use sqwa::nn::{evaluate, init_weights, Architecture, Network};
use sqwa::qat::ShadowModel;
use sqwa::quant::direct_quantize_model;
use sqwa::Error;

fn net(seed: u64) -> Network {
    let mut n = init_weights(&Architecture::mlp(&[4, 7, 3]), seed).unwrap();
    n.round_to_f32();
    n
}

fn shadow(seed: u64) -> ShadowModel {
    let base = net(1);
    let quant = sqwa::quant::ModelQuantizer::fit(&base, 2).unwrap();
    let mut m = ShadowModel::new(net(seed), quant).unwrap();
    m.canonicalize();
    m
}

fn bank(n: usize) -> CaptureBank {
    let first = shadow(10);
    let mut bank = CaptureBank::new(first.quantizer().clone());
    for i in 0..n {
        bank.push(Capture {
            epoch: 5 + 6 * i,
            lr: 1e-4,
            model: shadow(10 + i as u64),
            metrics: None,
        })
        .unwrap();
    }
    bank
}

fn bytes(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    (
        fs::read(dir.join(MANIFEST_FILE)).unwrap(),
        fs::read(dir.join(PAYLOAD_FILE)).unwrap(),
    )
}

fn every_kind() -> Vec<Artifact> {
    let b = bank(3);
    vec![
        Artifact::FullPrecision(net(2)),
        Artifact::Quantized(direct_quantize_model(&net(3), 2).unwrap()),
        Artifact::Shadow(shadow(4)),
        Artifact::Averaged(average_models(&b, 3).unwrap()),
    ]
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (i, art) in every_kind().into_iter().enumerate() {
        let a = dir.path().join(format!("a{i}"));
        let b = dir.path().join(format!("b{i}"));
        save(&art, &a, Provenance::default()).unwrap();
        let (loaded, manifest) = load(&a).unwrap();
        assert_eq!(loaded, art, "kind {:?}", art.kind());
        save(&loaded, &b, manifest.provenance).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
    }
}

#[test]
fn evaluation_identical_after_round_trip() {
    let ds = synthetic_blobs(3, 20, 4, 0.5, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, art) in every_kind().into_iter().enumerate() {
        let p = dir.path().join(format!("c{i}"));
        save(&art, &p, Provenance::default()).unwrap();
        let before = evaluate(art.inference_network().unwrap(), &ds).unwrap();
        let (loaded, _) = load(&p).unwrap();
        let after = evaluate(loaded.inference_network().unwrap(), &ds).unwrap();
        assert_eq!(before.loss.to_bits(), after.loss.to_bits());
        assert_eq!(before.accuracy, after.accuracy);
    }
}

#[test]
fn loaded_quantized_weights_on_grid() {
    let dir = tempfile::tempdir().unwrap();
    let q = direct_quantize_model(&net(6), 3).unwrap();
    save(&Artifact::Quantized(q), dir.path(), Provenance::default()).unwrap();
    match load(dir.path()).unwrap().0 {
        Artifact::Quantized(q) => assert!(q.quantizer().is_on_grid(q.network())),
        other => panic!("unexpected {:?}", other.kind()),
    }
}

#[test]
fn tampered_payload_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save(&Artifact::Shadow(shadow(7)), dir.path(), Provenance::default()).unwrap();
    let path = dir.path().join(PAYLOAD_FILE);
    let mut payload = fs::read(&path).unwrap();
    payload[5] ^= 0x01;
    fs::write(&path, payload).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::ChecksumMismatch { .. })));
}

#[test]
fn shape_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save(&Artifact::FullPrecision(net(8)), dir.path(), Provenance::default()).unwrap();
    let mpath = dir.path().join(MANIFEST_FILE);
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
    manifest["tensors"][0]["shape"] = serde_json::json!([7, 5]);
    fs::write(&mpath, manifest.to_string()).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn bank_round_trip_and_missing_entry() {
    let dir = tempfile::tempdir().unwrap();
    let b = bank(4);
    save_bank(&b, dir.path(), &Provenance::default()).unwrap();
    let loaded = load_bank(dir.path()).unwrap();
    assert_eq!(loaded.epochs(), b.epochs());
    for (x, y) in loaded.entries().iter().zip(b.entries()) {
        assert_eq!(x.model, y.model);
    }
    fs::remove_dir_all(dir.path().join(capture_dir_name(11))).unwrap();
    assert!(matches!(load_bank(dir.path()), Err(Error::BankIncomplete { .. })));
}

#[test]
fn wrong_kind_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    save(&Artifact::FullPrecision(net(9)), dir.path(), Provenance::default()).unwrap();
    assert!(checkpoint::load_shadow(dir.path()).is_err());
}
