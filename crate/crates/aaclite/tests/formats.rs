use std::fs;

use aaclite::core::data::{Layout, ScoreDistribution};
use aaclite::core::model::{AacLiteNet, ModelConfig};
use aaclite::core::{Error as CoreError, Tensor};
use aaclite::dataset::{load_dataset, write_synthetic_dataset, Manifest, MANIFEST_FILE};
use aaclite::formats::{
    decode_image, encode_image, load_checkpoint, read_image, save_checkpoint, write_image,
};
use aaclite::Error;
use proptest::prelude::*;

fn small_layout() -> Layout {
    Layout {
        native_h: 200,
        native_w: 80,
        ..Layout::default()
    }
}

fn input(cfg: &ModelConfig, batch: usize) -> Tensor {
    Tensor::from_fn(&[batch, 3, cfg.input_h, cfg.input_w], |i| {
        (i as f64 * 0.37).sin()
    })
    .unwrap()
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::shrunken();
    let mut net = AacLiteNet::build(&cfg).unwrap();
    // move the zero-initialised head away from zero so outputs depend on it
    let fc = net.store().find("fc.weight").unwrap();
    let len = net.store().get(fc).numel();
    net.store_mut()
        .set(
            fc,
            (0..len).map(|i| (i as f64 * 0.37).sin() * 0.1).collect(),
        )
        .unwrap();
    let path = dir.path().join("m.aacl");
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.num_params(), net.num_params());
    let x = input(&cfg, 2);
    let (a, b) = (
        net.forward_batch(&x, false).unwrap(),
        back.forward_batch(&x, false).unwrap(),
    );
    for (a, b) in a.iter().zip(&b) {
        assert_eq!(a.regression.to_bits(), b.regression.to_bits());
        for (pa, pb) in a
            .granular_probs
            .iter()
            .flatten()
            .zip(b.granular_probs.iter().flatten())
        {
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }

    let size = fs::metadata(&path).unwrap().len() as usize;
    let payload = 8 * net.num_params();
    assert!(
        size >= payload && size < payload + payload / 5 + 4096,
        "{size} bytes for {payload}"
    );
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = AacLiteNet::build(&ModelConfig::shrunken()).unwrap();
    let path = dir.path().join("m.aacl");
    save_checkpoint(&net, &path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Core(CoreError::Format(_)))
    ));

    fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Core(CoreError::Format(_)))
    ));

    assert!(matches!(
        load_checkpoint(dir.path().join("none.aacl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn image_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn(&[5, 3], |i| i as f64 - 7.25).unwrap();
    let path = dir.path().join("x.aaci");
    write_image(&path, &img).unwrap();
    let back = read_image(&path).unwrap();
    assert_eq!(back.shape(), [5, 3]);
    assert_eq!(back.data(), img.data());
    assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 15 * 8);

    let mut bytes = fs::read(&path).unwrap();
    bytes[4] = 9;
    assert!(matches!(
        decode_image(&bytes),
        Err(CoreError::Version {
            found: 9,
            expected: 1
        })
    ));
}

#[test]
fn dataset_load_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(
        dir.path(),
        6,
        1,
        &ScoreDistribution::default(),
        &small_layout(),
        2,
    )
    .unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let data = load_dataset(&path, 32, 2).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(
        data.labels(),
        manifest.entries.iter().map(|e| e.label).collect::<Vec<_>>()
    );
    assert_eq!(data.samples[0].image.shape(), [3, 32, 32]);

    let victim = &manifest.entries[2];
    fs::remove_file(dir.path().join(&victim.image)).unwrap();
    match load_dataset(&path, 32, 2) {
        Err(Error::Io { path, .. }) => assert!(path.to_string_lossy().contains(&victim.id)),
        other => panic!("expected IO error, got {other:?}"),
    }

    let text = fs::read_to_string(&path).unwrap();
    let broken = text.replacen("\"risk\":\"", "\"risk\":\"Extreme", 1);
    fs::write(&path, broken).unwrap();
    assert!(matches!(
        Manifest::read(&path),
        Err(Error::Core(CoreError::Data(_))) | Err(Error::Json { .. })
    ));
}

#[test]
fn loading_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(
        dir.path(),
        9,
        4,
        &ScoreDistribution::default(),
        &small_layout(),
        3,
    )
    .unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let a = load_dataset(&path, 24, 1).unwrap();
    let b = load_dataset(&path, 24, 4).unwrap();
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image.data(), y.image.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn image_bytes_round_trip(h in 1usize..12, w in 1usize..12, vals in proptest::collection::vec(any::<f64>(), 144)) {
        let img = Tensor::from_fn(&[h, w], |i| vals[i]).unwrap();
        let bytes = encode_image(&img).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 8 * h * w);
        let back = decode_image(&bytes).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        prop_assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
    }
}
