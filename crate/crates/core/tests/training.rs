use rootfit_core::loss::loss_translation_rmse;
use rootfit_core::train::{
    batch_gradient, compare_reports, init_model, make_dataset, step, train, train_on, DataConfig,
    Dataset, LossWeights, Mode, ModelDims, ToyModel, ToySample, TrainConfig,
};
use rootfit_core::Translation3;

const DIMS: ModelDims = ModelDims {
    n_keypoints: 21,
    n_vertices: 64,
};

fn data() -> Dataset {
    make_dataset(11, 12, 4, &DataConfig::default(), true).unwrap()
}

/// A model past the detached warm-up, so most samples reach the solver.
fn warmed(d: &Dataset) -> ToyModel {
    let cfg = TrainConfig {
        epochs: 20,
        warmup_epochs: 20,
        n_train: 12,
        n_test: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    train_on(&cfg, d).unwrap().model
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 6,
        warmup_epochs: 2,
        n_train: 20,
        n_test: 10,
        batch_size: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn both_modes_share_the_forward_pass() {
    let d = data();
    let model = warmed(&d);
    let batch: Vec<&ToySample> = d.train.iter().collect();
    let l = LossWeights::default();
    let e = batch_gradient(&model, &batch, &d.template.jreg, &l, Mode::E2e, 1.0).unwrap();
    let s = batch_gradient(&model, &batch, &d.template.jreg, &l, Mode::Detached, 1.0).unwrap();
    assert_eq!(e.loss_sum.to_bits(), s.loss_sum.to_bits());
    assert_eq!(e.skipped, s.skipped);
    assert!(e.skipped < batch.len() / 2);
    assert!(!e.camera.is_zero());
    assert_eq!(e.relative.weights, s.relative.weights);
    assert!(s.camera.is_zero());
}

#[test]
fn detached_without_relative_terms_leaves_the_model_alone() {
    let d = data();
    let model = warmed(&d);
    let batch: Vec<&ToySample> = d.train.iter().collect();
    let l = LossWeights {
        rel: 0.0,
        kp2d: 0.0,
        ..LossWeights::default()
    };
    let (next, stats) = step(
        &model,
        &batch,
        &d.template.jreg,
        &l,
        Mode::Detached,
        0.01,
        1.0,
    )
    .unwrap();
    assert_eq!(next, model);
    assert_eq!(stats.relative_grad_norm, 0.0);
    assert_eq!(stats.camera_grad_norm, 0.0);
}

#[test]
fn zero_step_size_is_a_no_op() {
    let d = data();
    let model = init_model(3, DIMS).unwrap();
    let batch: Vec<&ToySample> = d.train.iter().collect();
    let l = LossWeights::default();
    for mode in [Mode::E2e, Mode::Detached] {
        let (next, _) = step(&model, &batch, &d.template.jreg, &l, mode, 0.0, 1.0).unwrap();
        assert_eq!(next, model);
    }
}

#[test]
fn translation_loss_alone_moves_the_model_end_to_end() {
    let d = data();
    let model = warmed(&d);
    let batch: Vec<&ToySample> = d.train.iter().collect();
    let l = LossWeights {
        rel: 0.0,
        kp2d: 0.0,
        trans: 1.0,
        consistency: 0.0,
        vert2d: 0.0,
    };
    let (next, stats) = step(&model, &batch, &d.template.jreg, &l, Mode::E2e, 0.01, 1.0).unwrap();
    assert!(stats.camera_grad_norm > 0.0, "{stats:?}");
    assert_ne!(next, model);
}

#[test]
fn predicted_weights_stay_inside_the_open_interval() {
    let cfg = small_config(Mode::E2e);
    let d = make_dataset(cfg.seed, cfg.n_train, cfg.n_test, &cfg.data, true).unwrap();
    let out = train_on(&cfg, &d).unwrap();
    for s in d.train.iter().chain(&d.test) {
        for w in out.model.predict(s).weights {
            assert!(w > 0.0 && w < 1.0, "weight {w}");
        }
    }
}

#[test]
fn translation_rmse_of_a_pure_offset_is_its_length() {
    let t = Translation3::new(0.1, -0.2, 0.6);
    let off = Translation3::new(0.006, 0.0, 0.008);
    assert!((loss_translation_rmse(&(t + off), &t) - 0.010 / 3f64.sqrt()).abs() < 1e-15);
    assert_eq!(loss_translation_rmse(&t, &t), 0.0);
}

#[test]
fn training_is_deterministic_and_comparisons_are_antisymmetric() {
    let a = train(&small_config(Mode::E2e)).unwrap();
    assert_eq!(a, train(&small_config(Mode::E2e)).unwrap());

    let same = compare_reports(&a, &a);
    assert_eq!(same.delta_cs_mje_mm, 0.0);
    assert_eq!(same.delta_rs_mje_mm, 0.0);
    assert_eq!(same.delta_inlier_weight, Some(0.0));

    let b = train(&small_config(Mode::Detached)).unwrap();
    let ab = compare_reports(&a, &b);
    let ba = compare_reports(&b, &a);
    assert_eq!(ab.delta_cs_mje_mm, -ba.delta_cs_mje_mm);
    assert_eq!(ab.delta_rs_mje_mm, -ba.delta_rs_mje_mm);
    assert_eq!(ab.delta_outlier_weight.map(|x| -x), ba.delta_outlier_weight);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            camera_grad_clip: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambdas: LossWeights {
                trans: -1.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(train(&cfg).is_err());
    }
}
