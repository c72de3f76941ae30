use exitprint::core::arch::small_convnet;
use exitprint::core::data::SyntheticSpec;
use exitprint::core::fingerprint::{FingerprintConfig, FingerprintSample, FingerprintSet};
use exitprint::core::{rng, BackboneModel, ExitPolicy, MultiExitModel, Shape};
use exitprint::format;
use proptest::prelude::*;
use rand::Rng;

fn model(seed: u64) -> MultiExitModel {
    let arch = small_convnet(Shape::new(3, 8, 8), 3, [2, 3, 3, 4, 4, 5]);
    let mut b = BackboneModel::new(&arch.layers, arch.input_shape, 3).unwrap();
    b.init(&mut rng::stream(seed, "b", 0));
    MultiExitModel::build(b, &arch.attach_indices, &mut rng::stream(seed, "h", 0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_container_round_trips_any_bit_pattern(seed in any::<u64>(), bits in prop::collection::vec(any::<u32>(), 16)) {
        let mut m = model(seed);
        // Arbitrary patterns, including NaN payloads and subnormals.
        for (w, b) in m.backbone.layers[0].weight.iter_mut().zip(&bits) {
            *w = f32::from_bits(*b);
        }
        let back = format::decode_model(&format::encode_model(&m, None).unwrap()).unwrap().model;
        let flat = |m: &MultiExitModel| -> Vec<u32> {
            m.backbone.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
                .chain(m.ics.iter().flat_map(|ic| ic.fc.weight.iter().chain(&ic.fc.bias)))
                .map(|v| v.to_bits()).collect()
        };
        prop_assert_eq!(flat(&back), flat(&m));
        prop_assert_eq!(&back.layer_costs, &m.layer_costs);
        prop_assert_eq!(back.attach_indices(), m.attach_indices());
    }
}

#[test]
fn model_file_keeps_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.emx");
    let p = ExitPolicy::confidence(0.875).unwrap().with_rad_target(0.15);
    format::save_model(&path, &model(1), Some(&p)).unwrap();
    let f = format::load_model(&path).unwrap();
    assert_eq!(f.model, model(1));
    assert_eq!(f.policy, Some(p));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = SyntheticSpec {
        train: 12,
        val: 5,
        test: 4,
        size: 8,
        ..Default::default()
    }
    .generate()
    .unwrap();
    format::save_dataset(dir.path(), &data).unwrap();
    let back = format::load_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    std::fs::write(dir.path().join("val.labels"), "1\n2\n").unwrap();
    assert!(format::load_dataset(dir.path()).is_err());
}

#[test]
fn fingerprint_set_round_trip_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(4, "fp", 0);
    let samples = (0..3)
        .map(|k| FingerprintSample {
            x: (0..12).map(|_| r.gen()).collect(),
            x_prime: (0..12).map(|_| r.gen()).collect(),
            l2_distance: 0.5 + k as f64,
            final_loss: -2.0,
            exit_index_on_target: if k == 0 { 2 } else { 6 },
        })
        .collect();
    let set = FingerprintSet {
        samples,
        target_model_id: "target".into(),
        config: FingerprintConfig::default(),
        seed: 9,
        created: None,
    };
    let path = dir.path().join("fp.fps");
    format::save_fingerprints(&path, &set, 6).unwrap();
    assert_eq!(format::load_fingerprints(&path).unwrap(), set);
    let manifest = std::fs::read_to_string(dir.path().join("fp.manifest.txt")).unwrap();
    assert!(manifest.contains("N: 3"));
    assert!(manifest.contains("mean_l2: 1.500000"));
    assert!(manifest.contains("exit_histogram: 1:0 2:1 3:0 4:0 5:0 6:2"));
}

#[test]
fn train_log_has_one_line_per_epoch() {
    use exitprint::core::train::{EpochLog, EpochObserver};
    let mut log = format::TrainLog::default();
    for epoch in 0..3 {
        log.epoch(&EpochLog {
            epoch,
            train_loss: 1.0 / (epoch + 1) as f64,
            val_accuracy: 0.5,
        });
    }
    let text = log.render();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], format::TrainLog::HEADER);
    assert!(lines[3].starts_with("3\t0.333333\t0.5000\t"));
}
