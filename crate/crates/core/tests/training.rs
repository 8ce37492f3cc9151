use hbmcn::checkpoint;
use hbmcn::data::{synth_image, SynthSpec, DEFAULT_NORMALIZE};
use hbmcn::train::AugmentConfig;
use hbmcn::{fit, Error, Model32, ModelConfig, TrainConfig, TrainSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synthetic_set(ids: usize, per_id: usize) -> TrainSet<f32> {
    let spec = SynthSpec { n_ids: ids.max(3), per_id, n_cams: 3, image_hw: [128, 64], seed: 11 };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for id in 0..ids {
        for k in 0..per_id {
            images.push(synth_image(&spec, id as u64 + 1, (k % 3) as u64 + 1, k as u64));
            labels.push(id);
        }
    }
    TrainSet { images, labels, normalize: DEFAULT_NORMALIZE }
}

fn nano(classes: usize, seed: u64) -> Model32 {
    Model32::build(&ModelConfig::nano(classes), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn overfits_one_batch() {
    let data = synthetic_set(4, 2);
    let mut model = nano(4, 1);
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 50,
        lr_steps: vec![],
        augment: AugmentConfig::none(),
        ..TrainConfig::nano()
    };
    let trace = fit(&mut model, &data, &cfg, |_| {}).unwrap();
    let losses: Vec<f64> = trace.iter().map(|s| s.mean_loss).collect();
    assert_eq!(losses.len(), 50);
    assert!(losses[49] < 0.1 * losses[0], "first {} last {}", losses[0], losses[49]);
    let windows: Vec<f64> = losses[10..].chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "window means {windows:?}");
    }
}

#[test]
fn fit_is_bit_reproducible() {
    let data = synthetic_set(3, 4);
    let cfg = TrainConfig { batch_size: 4, epochs: 2, seed: 5, ..TrainConfig::nano() };
    let run = || {
        let mut model = nano(3, 2);
        let trace = fit(&mut model, &data, &cfg, |_| {}).unwrap();
        (checkpoint::to_bytes(&model, &cfg.optim).unwrap(), trace)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert!(a == b, "checkpoints differ");
    assert_eq!(ta, tb);
    assert_eq!(ta[0].lr, 0.01);
    assert_eq!(ta[0].epoch, 0);
}

#[test]
fn fit_rejects_bad_datasets() {
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::nano() };
    let mut model = nano(3, 0);
    let empty = TrainSet { images: vec![], labels: vec![], normalize: DEFAULT_NORMALIZE };
    assert!(matches!(fit(&mut model, &empty, &cfg, |_| {}), Err(Error::Dataset(_))));
    let mut bad = synthetic_set(3, 2);
    bad.labels[1] = 3;
    assert!(matches!(fit(&mut model, &bad, &cfg, |_| {}), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
}
