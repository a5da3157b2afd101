use super::*;

fn small_spec() -> SynthSpec {
    let mut spec = SynthSpec::default();
    spec.image_shape = [3, 16, 16];
    spec.depth_shape = [4, 4];
    spec.domains.truncate(2);
    for d in &mut spec.domains {
        d.n_real = 12;
        d.n_fake = 10;
    }
    spec
}

#[test]
fn generation_is_deterministic() {
    let spec = small_spec();
    assert_eq!(synth_domains(&spec).unwrap(), synth_domains(&spec).unwrap());
    let a = synth_domains(&spec).unwrap();
    assert_eq!(dataset_digest(&a), dataset_digest(&synth_domains(&spec).unwrap()));
}

#[test]
fn samples_respect_label_depth_invariants() {
    let ds = synth_domains(&small_spec()).unwrap();
    for d in &ds {
        assert_eq!(d.count(1), 12);
        assert_eq!(d.count(0), 10);
        for s in &d.samples {
            assert_eq!(s.x.shape(), &[3, 16, 16]);
            assert!(s.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let (lo, hi) = s.depth.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            if s.y == 0 {
                assert_eq!((lo, hi), (0.0, 0.0));
            } else {
                assert_eq!((lo, hi), (0.0, 1.0));
            }
        }
    }
}

#[test]
fn depth_target_examples() {
    let fake = make_depth_target(0, [8, 8]).unwrap();
    assert_eq!(fake.data(), &[0.0; 64][..]);
    let real = make_depth_target(1, [8, 8]).unwrap();
    assert_eq!(real.data()[4 * 8 + 4], 1.0);
    assert!(real.sum() > 0.0);
    assert!(make_depth_target(1, [0, 8]).is_err());
}

#[test]
fn invalid_specs_rejected() {
    let mut spec = small_spec();
    spec.domains[1].name = spec.domains[0].name.clone();
    assert!(synth_domains(&spec).is_err());

    let mut spec = small_spec();
    spec.domains[0].shift.brightness_scale = 0.0;
    assert!(synth_domains(&spec).is_err());

    let mut spec = small_spec();
    spec.domains[0].n_fake = 0;
    assert!(synth_domains(&spec).is_err());

    let mut spec = small_spec();
    spec.domains.truncate(1);
    assert!(synth_domains(&spec).is_err());
}

#[test]
fn identity_shift_gives_same_class_conditionals() {
    let mut spec = small_spec();
    for (i, d) in spec.domains.iter_mut().enumerate() {
        d.shift = DomainShift::identity(2);
        d.n_real = 400;
        d.n_fake = 400;
        d.seed = 17 + i as u64;
    }
    let ds = synth_domains(&spec).unwrap();
    for label in [0u8, 1u8] {
        let mean = |d: &DomainDataset| {
            let xs: Vec<&Sample> = d.samples.iter().filter(|s| s.y == label).collect();
            let mut m = vec![0.0; 3 * 16 * 16];
            for s in &xs {
                for (a, v) in m.iter_mut().zip(s.x.data()) {
                    *a += v / xs.len() as f64;
                }
            }
            m
        };
        let (a, b) = (mean(&ds[0]), mean(&ds[1]));
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // per-pixel standard error with 400 samples is below 0.02
        assert!(worst < 0.08, "label {label}: {worst}");
    }
    // With the same seed, the streams coincide exactly.
    spec.domains[1].seed = spec.domains[0].seed;
    let ds = synth_domains(&spec).unwrap();
    assert_eq!(ds[0].samples, ds[1].samples);
}

#[test]
fn batch_is_stratified_and_reproducible() {
    let ds = synth_domains(&small_spec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = sample_batch(&ds[0], 20, &mut rng).unwrap();
    assert_eq!(b.len(), 20);
    assert_eq!(b.y.sum(), 10.0);
    assert_eq!(b.x.shape(), &[20, 3, 16, 16]);
    assert_eq!(b.depth.shape(), &[20, 1, 4, 4]);

    let again = sample_batch(&ds[0], 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(b, again);

    assert!(matches!(sample_batch(&ds[0], 3, &mut rng), Err(Error::Config(_))));
    assert!(matches!(
        sample_batch(&ds[0], 22, &mut rng),
        Err(Error::InsufficientSamples { class: 0, needed: 11, have: 10, .. })
    ));
}

#[test]
fn batch_of_two_on_minimal_domain_is_forced() {
    let mut spec = small_spec();
    for d in &mut spec.domains {
        d.n_real = 1;
        d.n_fake = 1;
    }
    let ds = synth_domains(&spec).unwrap();
    let b = sample_batch(&ds[0], 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let real = ds[0].samples.iter().find(|s| s.y == 1).unwrap();
    let fake = ds[0].samples.iter().find(|s| s.y == 0).unwrap();
    assert_eq!(b, Batch::from_samples([real, fake], [3, 16, 16], [4, 4]).unwrap());
}

#[test]
fn validation_split_is_per_class() {
    let ds = synth_domains(&small_spec()).unwrap();
    let (train, val) = ds[0].split_validation(0.1).unwrap();
    assert_eq!((val.count(1), val.count(0)), (2, 1));
    assert_eq!((train.count(1), train.count(0)), (10, 9));
}

mod persistence {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let ds = synth_domains(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn blob_sizes_follow_manifest_arithmetic() {
        let ds = synth_domains(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let n = 22u64;
        let dom = dir.path().join(ds[0].name());
        assert_eq!(std::fs::metadata(dom.join("inputs.f32")).unwrap().len(), n * 3 * 16 * 16 * 4);
        assert_eq!(std::fs::metadata(dom.join("labels.u8")).unwrap().len(), n);
        assert_eq!(std::fs::metadata(dom.join("depth.f32")).unwrap().len(), n * 4 * 4 * 4);
    }

    #[test]
    fn truncated_blob_names_the_file() {
        let ds = synth_domains(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let blob = dir.path().join(ds[1].name()).join("inputs.f32");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }));
        assert!(msg.contains("inputs.f32") && msg.contains(ds[1].name()), "{msg}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let ds = synth_domains(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
        std::fs::write(&path, text).unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("version 7"), "{msg}");
    }

    #[test]
    fn manifest_count_disagreement_detected() {
        let ds = synth_domains(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"n_samples\": 22", "\"n_samples\": 21", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
