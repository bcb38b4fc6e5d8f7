use std::fs;

use ctxmod::checkpoint::Checkpoint;
use ctxmod::container::{load_dataset, read_meta, save_dataset, IMAGES_FILE, RESPONSES_FILE};
use ctxmod::DataError;
use ctxmod_core::model::Model;
use ctxmod_core::spec::preset;
use ctxmod_core::synth::{generate_dataset, generate_neurons, ImageSource, NeuronConfig};
use ctxmod_core::train::{fc1_init, rf_sa_init, PIPELINE_CHANNELS};

fn small_dataset() -> ctxmod_core::dataset::Dataset {
    let neurons = generate_neurons(3, &NeuronConfig::default(), 9).unwrap();
    generate_dataset(12, 6, &neurons, ImageSource::Procedural, 9).unwrap()
}

#[test]
fn dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    save_dataset(&ds, dir.path(), &[("note".into(), "x".into())]).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(read_meta(dir.path()).unwrap()["note"], "x");
}

#[test]
fn flipped_byte_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&small_dataset(), dir.path(), &[]).unwrap();
    let p = dir.path().join(RESPONSES_FILE);
    let mut b = fs::read(&p).unwrap();
    b[5] ^= 0x10;
    fs::write(&p, b).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Checksum { .. })));
}

#[test]
fn truncated_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&small_dataset(), dir.path(), &[]).unwrap();
    let p = dir.path().join(IMAGES_FILE);
    let b = fs::read(&p).unwrap();
    fs::write(&p, &b[..b.len() - 4]).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn checkpoints_round_trip_with_freeze_state() {
    let dir = tempfile::tempdir().unwrap();
    let rf = Model::build(&preset("rf-CNN").unwrap().with_channels(PIPELINE_CHANNELS), 1).unwrap();
    let fc1 = fc1_init(&rf_sa_init(&rf, 2).unwrap(), 3).unwrap();
    let ck = Checkpoint::new(fc1).with("stage", "fc1").with("neuron", 4);
    let path = dir.path().join("a/b.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.get("neuron"), Some("4"));
    assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_bytes(), ck.to_bytes());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ck = Checkpoint::new(Model::build(&preset("rf-CNN").unwrap(), 1).unwrap());
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(DataError::Checksum { .. })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
}
