use image::RgbImage;
use mres_core::dataset::{tokenize, WordVocab};
use mres_core::mask::BinaryMask;
use mres_core::model::{read_checkpoint, ModelConfig, UniRes};
use mres_core::nn::Scalar;
use mres_core::synthetic::toy_set;
use mres_core::training::{
    check_gradients, example_gradients, fit, group_grad_norms, lr_at, prepare_example, FitOptions, LossKind, TrainConfig, TrainError,
    TrainExample, TrainState, AdamW,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_example(cfg: &ModelConfig, seed: u64, full_res: bool) -> TrainExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size as u32;
    let img = RgbImage::from_fn(size, size, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
    let s = cfg.image_size;
    let gt = BinaryMask::from_fn(s, s, |x, y| (x * 7 + y * 3 + seed as usize) % 5 < 2).unwrap();
    let vocab = WordVocab::from_expressions(["left ear of the brown dog"]);
    let tokens = tokenize("left ear of the dog", &vocab, cfg.max_text_len).unwrap();
    prepare_example(format!("r{seed}"), cfg, full_res, &img, tokens, &gt).unwrap()
}

fn toy_examples(cfg: &ModelConfig) -> (Vec<TrainExample>, WordVocab) {
    let set = toy_set();
    let vocab = WordVocab::from_expressions(set.split.samples.iter().map(|s| s.expression.as_str()));
    let ex = set
        .split
        .samples
        .iter()
        .map(|s| {
            let tokens = tokenize(&s.expression, &vocab, cfg.max_text_len).unwrap();
            let img = set.image(&s.image_ref).unwrap();
            prepare_example(s.sample_id.clone(), cfg, false, img, tokens, &s.decode_mask().unwrap()).unwrap()
        })
        .collect();
    (ex, vocab)
}

fn short_run(model: ModelConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        weight_decay: 0.0,
        warmup_epochs: 1,
        epochs: 3,
        batch_size: 3,
        model,
        ..TrainConfig::finetune()
    }
}

#[test]
fn f64_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let model = UniRes::<f64>::new(cfg.clone(), 11).unwrap();
    for full_res in [false, true] {
        let ex = random_example(&cfg, 4, full_res);
        let checks = check_gradients(&model, &ex, LossKind::BcePlusDice, 20, 1e-4, 1e-4, 9).unwrap();
        for c in &checks {
            assert!(c.samples >= 20, "{c:?}");
            assert!(c.max_rel_error < 1e-6, "full_res={full_res} {c:?}");
        }
    }
}

#[test]
fn f32_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let model = UniRes::<f32>::new(cfg.clone(), 12).unwrap();
    let ex = random_example(&cfg, 5, false);
    for c in check_gradients(&model, &ex, LossKind::BcePlusDice, 20, 1e-4, 1e-4, 10).unwrap() {
        assert!(c.max_rel_error < 1e-3, "{c:?}");
    }
}

#[test]
fn every_group_receives_gradient() {
    let cfg = ModelConfig::tiny();
    let model = UniRes::<f64>::new(cfg.clone(), 2).unwrap();
    let norms = group_grad_norms(&model, &random_example(&cfg, 1, false), LossKind::BcePlusDice).unwrap();
    for g in ["group_tokens.low", "group_tokens.high", "lrf.low", "lrf.high"] {
        assert!(norms.iter().any(|(n, _)| n == g), "missing group {g}");
    }
    for (group, norm) in norms {
        assert!(norm > 0.0 && norm.is_finite(), "{group}: {norm}");
    }
}

fn param_snapshot<T: Scalar>(m: &UniRes<T>) -> Vec<Vec<f64>> {
    m.params().iter().map(|(_, p)| p.value.data().iter().map(|v| v.as_f64()).collect()).collect()
}

#[test]
fn one_step_moves_every_group() {
    let cfg = ModelConfig::tiny();
    let mut model = UniRes::<f64>::new(cfg.clone(), 3).unwrap();
    let before = param_snapshot(&model);
    let ex = vec![random_example(&cfg, 2, false)];
    let tc = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        batch_size: 1,
        learning_rate: 1e-3,
        ..short_run(cfg)
    };
    let out = fit(&mut model, &ex, &tc, FitOptions::default()).unwrap();
    assert_eq!(out.log.len(), 1);
    let after = param_snapshot(&model);
    for group in model.params().groups() {
        let moved = model
            .params()
            .group_members(&group)
            .iter()
            .any(|id| before[id.index()] != after[id.index()]);
        assert!(moved, "{group} did not change");
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::toy();
    let (ex, _) = toy_examples(&cfg);
    let run = || {
        let mut m = UniRes::<f32>::new(cfg.clone(), 7).unwrap();
        let out = fit(&mut m, &ex, &short_run(cfg.clone()), FitOptions::default()).unwrap();
        (param_snapshot(&m), out.log.iter().map(|e| e.loss).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_update_is_identity() {
    let cfg = ModelConfig::tiny();
    let ex = random_example(&cfg, 3, false);
    for wd in [0.0, 0.5] {
        let mut model = UniRes::<f64>::new(cfg.clone(), 5).unwrap();
        let before = param_snapshot(&model);
        let (_, grads) = example_gradients(&model, &ex, LossKind::BcePlusDice).unwrap();
        let mut opt = AdamW::new(model.params(), wd);
        opt.step(model.params_mut(), &grads, 0.0);
        assert_eq!(param_snapshot(&model), before, "wd {wd}");
    }
}

#[test]
fn zero_learning_rate_is_rejected_by_config() {
    let tc = TrainConfig {
        learning_rate: 0.0,
        ..short_run(ModelConfig::tiny())
    };
    assert!(matches!(tc.validate(), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn weight_decay_is_decoupled() {
    let cfg = ModelConfig::tiny();
    let ex = vec![random_example(&cfg, 3, false)];
    let lr = 1e-2;
    let wd = 0.5;
    let after = |weight_decay: f64, freeze: bool| {
        let mut model = UniRes::<f64>::new(cfg.clone(), 5).unwrap();
        let tc = TrainConfig {
            learning_rate: lr,
            weight_decay,
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 1,
            freeze: if freeze { vec![String::new()] } else { Vec::new() },
            ..short_run(cfg.clone())
        };
        fit(&mut model, &ex, &tc, FitOptions::default()).unwrap();
        param_snapshot(&model)
    };
    let start = param_snapshot(&UniRes::<f64>::new(cfg.clone(), 5).unwrap());
    let plain = after(0.0, false);
    let decayed = after(wd, false);
    for ((p0, a), b) in start.iter().flatten().zip(plain.iter().flatten()).zip(decayed.iter().flatten()) {
        assert!((b - (a - lr * wd * p0)).abs() < 1e-12);
    }
    assert_eq!(after(wd, true), start, "frozen parameters must not decay");
}

#[test]
fn zero_epochs_leaves_model_untouched() {
    let cfg = ModelConfig::tiny();
    let mut model = UniRes::<f64>::new(cfg.clone(), 1).unwrap();
    let before = param_snapshot(&model);
    let tc = TrainConfig {
        epochs: 0,
        warmup_epochs: 0,
        ..short_run(cfg.clone())
    };
    let out = fit(&mut model, &[random_example(&cfg, 1, false)], &tc, FitOptions::default()).unwrap();
    assert!(out.log.is_empty() && out.checkpoints.is_empty());
    assert_eq!(param_snapshot(&model), before);
}

#[test]
fn empty_dataset_is_rejected() {
    let cfg = ModelConfig::tiny();
    let mut model = UniRes::<f64>::new(cfg.clone(), 1).unwrap();
    let err = fit(&mut model, &[], &short_run(cfg), FitOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = ModelConfig::toy();
    let (ex, vocab) = toy_examples(&cfg);
    let tc = short_run(cfg.clone());
    let dir = tempfile::tempdir().unwrap();

    let mut full = UniRes::<f32>::new(cfg.clone(), 9).unwrap();
    let whole = fit(
        &mut full,
        &ex,
        &tc,
        FitOptions {
            out_dir: Some(dir.path().join("full")),
            vocab: Some(vocab.clone()),
            resume: None,
        },
    )
    .unwrap();

    let ckpt = read_checkpoint(&whole.checkpoints[0]).unwrap();
    let state: TrainState = serde_json::from_value(ckpt.train_state.clone().unwrap()).unwrap();
    let per_epoch = ex.len().div_ceil(tc.batch_size);
    assert_eq!(state.step, per_epoch);
    let mut resumed: UniRes<f32> = ckpt.to_model().unwrap();
    let rest = fit(
        &mut resumed,
        &ex,
        &tc,
        FitOptions {
            out_dir: None,
            vocab: None,
            resume: Some(state),
        },
    )
    .unwrap();
    assert_eq!(rest.log[0].step, per_epoch);
    assert_eq!(rest.log.len(), whole.log.len() - per_epoch);
    for (a, b) in rest.log.iter().zip(&whole.log[per_epoch..]) {
        assert_eq!((a.step, a.loss, a.lr), (b.step, b.loss, b.lr));
    }
    assert_eq!(param_snapshot(&resumed), param_snapshot(&full));
}

#[test]
fn mismatched_resume_state_is_rejected() {
    let cfg = ModelConfig::toy();
    let (ex, _) = toy_examples(&cfg);
    let mut model = UniRes::<f32>::new(cfg.clone(), 9).unwrap();
    let tc = short_run(cfg);
    let mut state = fit(&mut model, &ex, &TrainConfig { epochs: 1, warmup_epochs: 0, ..tc.clone() }, FitOptions::default())
        .unwrap()
        .state;
    state.step += 1;
    let err = fit(
        &mut model,
        &ex,
        &tc,
        FitOptions {
            resume: Some(state),
            ..FitOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::Resume(_)));
}

#[test]
fn divergence_reports_step_and_samples() {
    let cfg = ModelConfig::tiny();
    let mut model = UniRes::<f32>::new(cfg.clone(), 4).unwrap();
    let ex = vec![random_example(&cfg, 1, false), random_example(&cfg, 2, false)];
    let tc = TrainConfig {
        learning_rate: 1e30,
        epochs: 5,
        ..short_run(cfg)
    };
    match fit(&mut model, &ex, &tc, FitOptions::default()).unwrap_err() {
        TrainError::NonFiniteLoss { step, samples, .. } => {
            assert!(step > 0);
            assert!(samples.contains('r'), "{samples}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn logged_learning_rate_follows_schedule() {
    let cfg = ModelConfig::toy();
    let (ex, _) = toy_examples(&cfg);
    let tc = short_run(cfg.clone());
    let mut m = UniRes::<f32>::new(cfg, 1).unwrap();
    let out = fit(&mut m, &ex, &tc, FitOptions::default()).unwrap();
    let total = out.log.len();
    for e in &out.log {
        assert_eq!(e.lr, lr_at(e.step, total, &tc));
    }
    assert_eq!(out.log[0].lr, 0.0);
}
