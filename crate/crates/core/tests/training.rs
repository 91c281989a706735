use mhapool::encoder::EncoderConfig;
use mhapool::features::{mel_spectrogram, synth_speaker_dataset, FeatureConfig};
use mhapool::head::HeadConfig;
use mhapool::model::{dropout_rng, Model, ModelConfig};
use mhapool::pooling::{PoolingConfig, PoolingKind};
use mhapool::trainer::{adam_step, train, AdamConfig, AdamState, TrainConfig, Utterance};

fn utterances(speakers: usize, per: usize, seed: u64) -> Vec<Utterance> {
    let fc = FeatureConfig::default();
    synth_speaker_dataset(speakers, per, seed)
        .unwrap()
        .into_iter()
        .map(|c| Utterance {
            id: c.relative_path(),
            label: c.label,
            spec: mel_spectrogram(&c.clip, &fc).unwrap(),
        })
        .collect()
}

fn config(speakers: usize, kind: PoolingKind) -> ModelConfig {
    ModelConfig {
        features: FeatureConfig::default(),
        encoder: EncoderConfig::scaled_down(32),
        pooling: PoolingConfig::new(kind, 8),
        head: HeadConfig::default(),
        n_speakers: speakers,
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        crop_frames: Some(100),
        ..TrainConfig::default()
    }
}

#[test]
fn four_speakers_reach_ninety_percent_train_accuracy() {
    let data = utterances(4, 20, 3);
    let cfg = TrainConfig {
        max_epochs: 30,
        patience: 30,
        ..desk_train()
    };
    let out = train(Model::new(config(4, PoolingKind::Mha), 0).unwrap(), &data, &cfg, |_| {}).unwrap();
    let best = out.history.iter().map(|l| l.train_acc).fold(0.0, f64::max);
    assert!(out.history.len() <= 30);
    assert!(best > 0.9, "best train accuracy {best}");
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let data = utterances(4, 4, 5);
    let batch: Vec<_> = data.iter().step_by(2).map(|u| (&u.spec, u.label)).collect();
    let adam = AdamConfig::default();
    assert_eq!(adam.lr, 1e-4);
    let mut failures = Vec::new();
    for seed in 0..10 {
        let mut model = Model::new(config(4, PoolingKind::Mha), seed).unwrap();
        let before = model.batch_gradients(&batch, &mut dropout_rng(seed, 1, 0)).unwrap();
        let mut state = AdamState::new(&model.trainable());
        adam_step(&mut model.trainable_mut(), &before.grads, &mut state, &adam).unwrap();
        let after = model.batch_gradients(&batch, &mut dropout_rng(seed, 1, 0)).unwrap();
        if after.loss >= before.loss {
            failures.push((seed, before.loss, after.loss));
        }
    }
    assert!(failures.len() <= 1, "loss did not decrease: {failures:?}");
}

#[test]
fn returned_checkpoint_is_never_worse_than_a_recorded_best() {
    let data = utterances(3, 8, 7);
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 2,
        ..desk_train()
    };
    let out = train(Model::new(config(3, PoolingKind::Attention), 1).unwrap(), &data, &cfg, |_| {}).unwrap();
    let min = out.history.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.checkpoint.best_val_loss, min);
    assert_eq!(out.history[out.checkpoint.epoch - 1].val_loss, min);
    if out.stopped_early {
        let tail = &out.history[out.checkpoint.epoch..];
        assert_eq!(tail.len(), cfg.patience);
        assert!(tail.iter().all(|l| l.val_loss >= min));
    }
}

#[test]
fn fixed_seed_reproduces_the_loss_curve() {
    let data = utterances(3, 6, 9);
    let cfg = TrainConfig {
        max_epochs: 4,
        ..desk_train()
    };
    let run = || {
        train(Model::new(config(3, PoolingKind::Statistical), 2).unwrap(), &data, &cfg, |_| {})
            .unwrap()
            .history
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.train_loss - y.train_loss).abs() < 1e-6);
        assert!((x.val_loss - y.val_loss).abs() < 1e-6);
    }
}
