mod common;

use common::{blob_fixture, resume_check};
use oodkit::datakit::tensor_file::header_len;
use oodkit::datakit::{
    decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, generate_synthetic, load_checkpoint,
    load_split, read_tensor_file, save_checkpoint, write_dataset, write_tensor_file, CheckpointFile, ShapeKind,
    Split, SyntheticSpec,
};
use oodkit::nn::LayerSpec;
use oodkit::posthoc::{fit_class_stats, Shrinkage};
use oodkit::train::{TrainMode, Trainer};
use oodkit::{Error, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..6, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn tensor_bytes_round_trip(t in tensor_strategy()) {
        let bytes = encode_tensor(&t);
        prop_assert_eq!(bytes.len(), header_len(t.shape().len()) + 4 * t.numel());
        let back = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn every_truncation_is_rejected(t in tensor_strategy()) {
        let bytes = encode_tensor(&t);
        for cut in 0..bytes.len() {
            let err = decode_tensor(&bytes[..cut]).unwrap_err();
            prop_assert!(matches!(err, Error::Format { .. }), "cut {}: {}", cut, err);
        }
    }
}

#[test]
fn tensor_file_examples() {
    let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 1e30, -0.0]).unwrap();
    let bytes = encode_tensor(&t);
    assert_eq!(header_len(2), 21);
    assert_eq!(bytes.len(), 21 + 24);
    assert_eq!(&bytes[..4], b"OODT");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    assert_eq!(bytes[8], 1);
    assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
    assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.oodt");
    write_tensor_file(&t, &path).unwrap();
    assert_eq!(bits(&read_tensor_file(&path).unwrap()), bits(&t));

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_tensor(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(decode_tensor(&bad), Err(Error::Format { offset: 4, .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(decode_tensor(&extra), Err(Error::Format { .. })));
    assert!(matches!(read_tensor_file(dir.path().join("missing.oodt")), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let (data, specs, cfg) = blob_fixture();
    let mut tr = Trainer::new(&data.train, &specs, cfg, TrainMode::Joint, 11).unwrap();
    tr.run_iterations(5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.oodc");
    let b = dir.path().join("b.oodc");
    save_checkpoint(tr.state(), &a).unwrap();
    let loaded = load_checkpoint(&a, &specs).unwrap();
    assert_eq!(&loaded, tr.state());
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn resume_matches_uninterrupted_training() {
    for mode in [TrainMode::Joint, TrainMode::Ce] {
        for split in [1, 7, 8] {
            let r = resume_check(mode, split, 10, 5);
            assert!(r.logs_equal && r.states_equal && r.checkpoint_stable, "{mode:?} at {split}: {r:?}");
        }
    }
}

#[test]
fn mismatched_spec_names_the_tensor() {
    let (data, specs, cfg) = blob_fixture();
    let tr = Trainer::new(&data.train, &specs, cfg, TrainMode::Joint, 0).unwrap();
    let bytes = encode_checkpoint(tr.state()).unwrap();
    let mut wider = specs.clone();
    wider.cls.layers[0] = LayerSpec::Dense { units: 33 };
    match decode_checkpoint(&bytes, &wider) {
        Err(Error::ShapeMismatch { name, .. }) => assert!(name.starts_with("cls.0."), "{name}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    let mut deeper = specs.clone();
    deeper.dis.layers.insert(0, LayerSpec::Dense { units: 8 });
    deeper.dis.layers.insert(1, LayerSpec::LeakyRelu { alpha: 0.2 });
    assert!(decode_checkpoint(&bytes, &deeper).is_err());

    let dup = CheckpointFile {
        meta: vec![],
        tensors: vec![("x".into(), Tensor::zeros(&[1])), ("x".into(), Tensor::zeros(&[1]))],
    };
    assert!(matches!(dup.encode(), Err(Error::Checkpoint(m)) if m.contains("`x`")));
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut], &specs).is_err());
    }
}

#[test]
fn generated_datasets_validate_and_reproduce() {
    let spec = SyntheticSpec {
        samples_per_class: 20,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let n_c = spec.n_classes();
    assert_eq!(data.train.len(), 16 * n_c);
    assert_eq!(data.test.len(), 4 * n_c);
    for c in 0..n_c {
        assert_eq!(data.train.labels.iter().filter(|&&l| l == c).count(), 16);
        assert_eq!(data.test.labels.iter().filter(|&&l| l == c).count(), 4);
    }
    assert_eq!(data.ood.batch(), spec.ood_per_kind * spec.ood_kinds.len());
    for t in [&data.train.inputs, &data.test.inputs, &data.ood] {
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(&t.shape()[1..], &[32, 32, 3]);
    }

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let paths = write_dataset(a.path(), &spec, &data).unwrap();
    write_dataset(b.path(), &spec, &generate_synthetic(&spec).unwrap()).unwrap();
    for p in &paths {
        let (m, samples, labels) = load_split(p).unwrap();
        assert_eq!(m.class_names.len(), n_c);
        assert_eq!(labels.is_some(), m.split != Split::Ood);
        assert_eq!(samples.shape()[1..], m.shape[..]);
    }
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }

    let other = generate_synthetic(&SyntheticSpec { seed: 43, ..spec.clone() }).unwrap();
    assert_ne!(other.train.inputs, data.train.inputs);
}

#[test]
fn manifest_validation_rejects_bad_files() {
    let spec = SyntheticSpec {
        samples_per_class: 10,
        ..SyntheticSpec::blobs()
    };
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_dataset(dir.path(), &spec, &data).unwrap();
    let train = &paths[0];

    let labels = dir.path().join("train_labels.oodt");
    write_tensor_file(&Tensor::full(&[data.train.len()], 9.0), &labels).unwrap();
    assert!(load_split(train).is_err());
    write_tensor_file(&Tensor::full(&[3], 0.0), &labels).unwrap();
    assert!(load_split(train).is_err());

    let samples = dir.path().join("test_samples.oodt");
    let mut hot = data.test.inputs.clone();
    hot.data_mut()[0] = 1.5;
    write_tensor_file(&hot, &samples).unwrap();
    assert!(load_split(&paths[1]).is_err());

    assert!(load_split(&paths[2]).unwrap().2.is_none());
}

#[test]
fn overlapping_kinds_are_rejected() {
    let spec = SyntheticSpec {
        ood_kinds: vec![ShapeKind::Circle],
        ..SyntheticSpec::default()
    };
    assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidSpec { .. })));
    let spec = SyntheticSpec {
        noise: -0.1,
        ..SyntheticSpec::default()
    };
    assert!(generate_synthetic(&spec).is_err());
}

#[test]
fn blob_means_are_recovered() {
    let spec = SyntheticSpec {
        samples_per_class: 500,
        ..SyntheticSpec::blobs()
    };
    let data = generate_synthetic(&spec).unwrap();
    let stats = fit_class_stats(&data.train.inputs, &data.train.labels, Shrinkage::default()).unwrap();
    let n = 400.0f64;
    for (c, s) in stats.classes() {
        for (m, want) in s.mean.iter().zip(&data.blob_means[c]) {
            // Clipping to [0, 1] can only pull the sample mean inward; the margin
            // below assumes means sit well inside the unit cube.
            assert!((m - want).abs() <= 3.0 * spec.noise / n.sqrt(), "class {c}: {m} vs {want}");
        }
    }
    let k = spec.vector_dim;
    let in_means = &data.blob_means[..spec.blob_classes];
    for ood in &data.blob_means[spec.blob_classes..] {
        for m in in_means {
            let d = (0..k).map(|i| (ood[i] - m[i]).powi(2)).sum::<f64>().sqrt();
            assert!(d >= 6.0 * spec.noise, "OOD cluster only {d} away");
        }
    }
}
