use metro_core::model::{EncoderConfig, MetroModel, Retain};
use metro_core::synth::{Augmentation, Dataset, Preset, SynthConfig, Synthesizer};
use metro_core::train::{evaluate, train, tta_infer, EvalOptions, TrainConfig, TrainIo, LOG_HEADER};

fn setup(n: usize) -> (Synthesizer, Dataset, MetroModel) {
    let s = Synthesizer::new(SynthConfig {
        preset: Preset::Hand,
        n,
        seed: 9,
        feature_dim: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = s.generate().unwrap();
    let mut cfg = s.model_config(EncoderConfig::from_widths(8, &[8, 4], 2, 2).unwrap());
    cfg.upsampler_hidden = 4;
    let model = MetroModel::init(cfg, &s.assets.mesh, &s.assets.regressor, 2).unwrap();
    (s, data, model)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        lr_initial: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (_, data, model) = setup(4);
    let mut trained = model.clone();
    let cfg = TrainConfig {
        lr_initial: 0.0,
        ..quick(2)
    };
    let report = train(&mut trained, &data, &cfg, TrainIo::default()).unwrap();
    assert_eq!(trained, model);
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.lr == 0.0));
}

#[test]
fn training_is_deterministic_and_moves_the_weights() {
    let (_, data, model) = setup(4);
    let run = || {
        let mut m = model.clone();
        let r = train(&mut m, &data, &quick(2), TrainIo::default()).unwrap();
        (m, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_ne!(a.params().checksum(), model.params().checksum());
}

#[test]
fn evaluation_does_not_mutate_and_reload_reproduces_metrics() {
    let (_, data, mut model) = setup(4);
    train(&mut model, &data, &quick(1), TrainIo::default()).unwrap();
    let before = model.clone();
    let m1 = evaluate(&model, &data, EvalOptions::default()).unwrap();
    assert_eq!(model, before);
    let dir = tempfile::tempdir().unwrap();
    model.save_dir(dir.path()).unwrap();
    let loaded = MetroModel::load_dir(dir.path()).unwrap();
    assert_eq!(evaluate(&loaded, &data, EvalOptions::default()).unwrap(), m1);
}

#[test]
fn output_directory_gets_log_and_checkpoint() {
    let (_, data, mut model) = setup(4);
    let dir = tempfile::tempdir().unwrap();
    let io = TrainIo {
        out_dir: Some(dir.path()),
        ..TrainIo::default()
    };
    let report = train(&mut model, &data, &quick(3), io).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log, report.log_csv());
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert_eq!(log.lines().count(), 1 + 1 + 3);
    assert_eq!(MetroModel::load_dir(dir.path().join("checkpoint")).unwrap(), model);
}

#[test]
fn learning_rate_decays_stepwise() {
    let cfg = TrainConfig {
        epochs: 10,
        lr_initial: 1e-2,
        lr_decay_factor: 10.0,
        lr_decay_epoch: Some(4),
        ..TrainConfig::default()
    };
    let rates: Vec<f64> = (0..10).map(|e| cfg.lr_at(e)).collect();
    assert!(rates[..4].iter().all(|&r| r == 1e-2));
    assert!(rates[4..].iter().all(|&r| r == 1e-3));
    assert_eq!(
        TrainConfig {
            lr_decay_epoch: None,
            ..cfg
        }
        .decay_epoch(),
        5
    );
}

#[test]
fn invalid_train_configs_are_rejected() {
    let (_, data, mut model) = setup(2);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..quick(1)
        },
        TrainConfig {
            mvm_max_fraction: 1.5,
            ..quick(1)
        },
        TrainConfig {
            lr_initial: f64::NAN,
            ..quick(1)
        },
        TrainConfig {
            upsampler_lr_scale: -1.0,
            ..quick(1)
        },
    ] {
        assert_eq!(
            train(&mut model, &data, &cfg, TrainIo::default())
                .unwrap_err()
                .exit_code(),
            1
        );
    }
}

#[test]
fn frozen_upsampler_keeps_its_initial_values() {
    let (_, data, model) = setup(4);
    let mut m = model.clone();
    let cfg = TrainConfig {
        upsampler_lr_scale: 0.0,
        ..quick(2)
    };
    train(&mut m, &data, &cfg, TrainIo::default()).unwrap();
    for e in model.params().entries() {
        let now = m.params().by_name(&e.name).unwrap();
        if e.name.starts_with("upsampler.") {
            assert_eq!(now, e.value.as_ref(), "{}", e.name);
        }
    }
    assert_ne!(
        m.params().by_name("head.out.weight"),
        model.params().by_name("head.out.weight")
    );
}

#[test]
fn identity_tta_matches_plain_inference() {
    let (s, data, model) = setup(2);
    let sample = &data.samples[0];
    let id = Augmentation {
        yaw: 0.0,
        scale_jitter: 1.0,
    };
    let plain = model
        .infer(&sample.model_input(), Retain::None)
        .unwrap()
        .full_vertices3d;
    assert_eq!(tta_infer(&model, &s, sample, &[id, id]).unwrap(), plain);
    assert!(tta_infer(&model, &s, sample, &[]).is_err());
}
