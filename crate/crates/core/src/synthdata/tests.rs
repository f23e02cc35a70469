use std::collections::HashSet;

use super::*;

fn small(seed: u64) -> DatasetSpec {
    DatasetSpec {
        pretrain_per_class: 5,
        train_per_class: 6,
        test_per_class: 4,
        ..DatasetSpec::committed(seed)
    }
}

#[test]
fn noiseless_unshifted_images_equal_prototype() {
    let spec = DatasetSpec {
        noise_std: 0.0,
        shift: Shift::NONE,
        ..small(3)
    };
    let data = generate(&spec, ExecMode::Sequential).unwrap();
    for e in data.pretrain.iter().chain(&data.train).chain(&data.base_test) {
        assert_eq!(e.image.data(), prototype(&spec, e.label).as_slice());
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let spec = small(5);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save(a.path(), &generate(&spec, ExecMode::Parallel).unwrap()).unwrap();
    save(b.path(), &generate(&spec, ExecMode::Sequential).unwrap()).unwrap();
    for f in [MANIFEST_FILE, DATA_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let back = load(a.path()).unwrap();
    assert_eq!(back, generate(&spec, ExecMode::Sequential).unwrap());
}

#[test]
fn corrupted_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &generate(&small(1), ExecMode::Sequential).unwrap()).unwrap();
    let path = dir.path().join(DATA_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn shifted_moments_follow_affine_map() {
    let spec = DatasetSpec {
        pretrain_per_class: 400,
        train_per_class: 400,
        test_per_class: 1,
        ..DatasetSpec::committed(2)
    };
    let data = generate(&spec, ExecMode::Parallel).unwrap();
    let mean = |xs: &[Example]| {
        let mut m = vec![0.0; xs[0].image.len()];
        for e in xs {
            for (a, v) in m.iter_mut().zip(e.image.data()) {
                *a += v;
            }
        }
        m.iter().map(|v| v / xs.len() as f64).collect::<Vec<_>>()
    };
    let pre = mean(&data.pretrain);
    let down = mean(&data.train);
    let n = data.train.len() as f64;
    // Both means share the prototype average; only the noise averages differ.
    let sigma = spec.noise_std;
    let se = ((spec.shift.scale * sigma).powi(2) / n + (spec.shift.scale * sigma).powi(2) / n).sqrt();
    for (p, d) in pre.iter().zip(&down) {
        assert!((d - spec.shift.apply(*p)).abs() < 4.0 * se, "{d} vs {}", spec.shift.apply(*p));
    }
}

#[test]
fn splits_are_disjoint_and_labelled_by_half() {
    let data = generate(&small(4), ExecMode::Parallel).unwrap();
    let mut seen = HashSet::new();
    for kind in SplitKind::ALL {
        for e in data.split(kind) {
            assert!(seen.insert(e.id), "duplicate id {}", e.id);
            assert!(e.image.data().iter().all(|v| v.is_finite()));
        }
    }
    assert!(data.base_test.iter().all(|e| e.label < 6));
    assert!(data.new_test.iter().all(|e| e.label >= 6));
    assert_eq!(data.base_test.len(), 6 * 4);
    let mut captions = std::collections::HashMap::new();
    for e in &data.train {
        assert_eq!(*captions.entry(e.caption.clone()).or_insert(e.label), e.label);
        assert_eq!(vocab::class_of(&e.caption), Some(e.label));
    }
    assert_eq!(captions.len(), 12);
}

#[test]
fn spec_validation() {
    let bad = DatasetSpec {
        num_classes: 1,
        num_base: 0,
        ..small(1)
    };
    assert!(matches!(generate(&bad, ExecMode::Sequential), Err(Error::Spec(_))));
    let bad = DatasetSpec {
        shift: Shift { offset: 0.0, scale: 0.0 },
        ..small(1)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn shot_sampling_is_stratified_and_seeded() {
    let data = generate(&small(1), ExecMode::Sequential).unwrap();
    let all = sample_shots(&data.train, 6, 0).unwrap();
    assert_eq!(all, data.train);
    let four = sample_shots(&data.train, 4, 1).unwrap();
    assert_eq!(four.len(), 4 * 12);
    for c in 0..12 {
        assert_eq!(four.iter().filter(|e| e.label == c).count(), 4);
    }
    assert_eq!(four, sample_shots(&data.train, 4, 1).unwrap());
    let ids = |v: &[Example]| v.iter().map(|e| e.id).collect::<Vec<_>>();
    let committed: Vec<Vec<u64>> = [1, 2, 3].iter().map(|&s| ids(&sample_shots(&data.train, 4, s).unwrap())).collect();
    assert_ne!(committed[0], committed[1]);
    assert_ne!(committed[1], committed[2]);
    assert_ne!(committed[0], committed[2]);
    match sample_shots(&data.train, 7, 1) {
        Err(e @ Error::Shots { class: 0, available: 6, requested: 7 }) => {
            assert!(e.to_string().contains("class 0"), "{e}");
        }
        other => panic!("{other:?}"),
    }
}
