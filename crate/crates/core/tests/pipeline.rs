use pointaugment::dataio::{generate_synthetic, load_dataset, save_dataset};
use pointaugment::trainer::{load_checkpoint, run_training, save_checkpoint, train};
use pointaugment::{
    AugmentorConfig, ClassifierConfig, Dataset, LoadOptions, SynthConfig, TrainConfig, TrainSetup,
    TrainingState,
};

fn tiny_dataset(seed: u64) -> Dataset {
    let mut cfg = SynthConfig::desk_scale();
    cfg.train_counts = vec![6; 4];
    cfg.test_counts = vec![3; 4];
    cfg.n_points = 32;
    generate_synthetic(&cfg, seed).unwrap()
}

fn tiny_setup(epochs: usize) -> TrainSetup {
    TrainSetup {
        train: TrainConfig {
            epochs,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        },
        augmentor: AugmentorConfig {
            feature_channels: 8,
            feature_hidden: vec![8],
            shape_hidden: vec![8],
            displacement_hidden: vec![8],
            ..AugmentorConfig::default()
        },
        classifier: ClassifierConfig {
            point_widths: vec![8, 16],
            head_hidden: vec![8],
            num_classes: 4,
            normalize_features: true,
        },
    }
}

#[test]
fn saved_dataset_loads_back() {
    let ds = tiny_dataset(1);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(
        dir.path(),
        &LoadOptions {
            n_points: 32,
            seed: 0,
        },
    )
    .unwrap();
    assert_eq!(back.class_names, ds.class_names);
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!((&a.id, a.label, a.split), (&b.id, b.label, b.split));
        let diff = (&a.cloud.points() - &b.cloud.points())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "{} differs by {diff}", a.id);
    }
}

#[test]
fn interrupted_training_matches_unbroken() {
    let ds = tiny_dataset(2);
    let unbroken = train(&ds, &tiny_setup(4)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.bin");
    let first = train(&ds, &tiny_setup(2)).unwrap();
    save_checkpoint(&first, &ckpt).unwrap();
    let mut resumed: TrainingState = load_checkpoint(&ckpt).unwrap();
    resumed.config.epochs = 4;
    run_training(&mut resumed, &ds, |_| Ok(())).unwrap();

    assert_eq!(resumed, unbroken);
}

#[test]
fn training_is_reproducible() {
    let ds = tiny_dataset(3);
    let a = train(&ds, &tiny_setup(2)).unwrap();
    let b = train(&ds, &tiny_setup(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.metrics.len(), 2);
    assert!(a.metrics.iter().all(|m| m.rho >= 1.0));
}
