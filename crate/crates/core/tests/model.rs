use mres_core::dataset::{tokenize, WordVocab};
use mres_core::model::{
    group_assignment, group_assignment_tempered, histogram_entropy, import_weights, load_checkpoint,
    save_checkpoint, Checkpoint, GroupLevel, ModelConfig, ModelError, UniRes,
};
use mres_core::nn::{layers, Matrix};
use mres_core::pixels::PixelGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab() -> WordVocab {
    WordVocab::from_expressions(["the red dog on the left", "head of the cat", "blue car wheel"])
}

fn random_image(size: usize, seed: u64) -> image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image::RgbImage::from_fn(size as u32, size as u32, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

fn tiny() -> UniRes<f64> {
    UniRes::new(ModelConfig::tiny(), 3).unwrap()
}

/// Layer-by-layer count written out by hand for the tiny config.
#[test]
fn tiny_param_count_matches_manual_tally() {
    let d = 16;
    let linear = |i: usize, o: usize| i * o + o;
    let ln = 2 * d;
    let attn = 4 * linear(d, d);
    let mlp = linear(d, 4 * d) + linear(4 * d, d);
    let enc = 2 * ln + attn + mlp;
    let dec = 3 * ln + 2 * attn + mlp;
    let visual = linear(8 * 8 * 3, d) + 16 * d + (4 + 2) * d + 4 * enc + ln;
    let text = 32 * d + 17 * d + 2 * enc + ln;
    let lrf = 2 * 3 * linear(d, d);
    let decoder = 2 * dec + ln + linear(d, 1);
    let expected = visual + text + lrf + decoder;
    assert_eq!(ModelConfig::tiny().param_count(), expected);
    assert_eq!(tiny().param_count(), expected);
    assert_eq!(ModelConfig::tiny().param_count(), ModelConfig::tiny().param_count());
}

#[test]
fn disabling_banks_removes_exact_share() {
    let base = ModelConfig::tiny();
    let d = base.embed_dim;
    let mut fewer = base.clone();
    fewer.n_low_group -= 1;
    assert_eq!(base.param_count() - fewer.param_count(), d);

    let mut no_high = base.clone();
    no_high.n_high_group = 0;
    assert_eq!(
        base.param_count() - no_high.param_count(),
        base.n_high_group * d + base.region_filter_scalars()
    );
    let m = UniRes::<f64>::new(no_high.clone(), 1).unwrap();
    assert_eq!(m.param_count(), no_high.param_count());

    let mut none = base.clone();
    none.n_low_group = 0;
    none.n_high_group = 0;
    let m = UniRes::<f64>::new(none.clone(), 1).unwrap();
    assert_eq!(m.param_count(), none.param_count());
}

#[test]
fn sequence_lengths_follow_bank_sizes() {
    let cfg = ModelConfig::tiny();
    assert_eq!((cfg.first_half_len(), cfg.second_half_len()), (20, 22));
    let d = ModelConfig::default();
    assert_eq!((d.first_half_len(), d.second_half_len()), (260, 268));
    let m = tiny();
    let out = m.visual_encode(&PixelGrid::prepare(&random_image(32, 1), 32)).unwrap();
    assert_eq!(out.patch_features.shape(), (16, 16));
    assert_eq!(out.low_group_out.as_ref().unwrap().shape(), (4, 16));
    assert_eq!(out.high_group_out.as_ref().unwrap().shape(), (2, 16));
}

#[test]
fn wrong_image_size_is_rejected() {
    let m = tiny();
    let err = m.visual_encode(&PixelGrid::solid(24, [0, 0, 0])).unwrap_err();
    assert!(matches!(err, ModelError::ShapeMismatch(_)));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::tiny();
    c.visual_layers = 3;
    assert!(matches!(UniRes::<f32>::new(c, 0), Err(ModelError::InvalidConfig(_))));
    let mut c = ModelConfig::tiny();
    c.patch_size = 5;
    assert!(UniRes::<f32>::new(c, 0).is_err());
}

#[test]
fn forward_is_deterministic_and_sized() {
    let v = vocab();
    let t = tokenize("the red dog", &v, 17).unwrap();
    let img = random_image(40, 9);
    let a = UniRes::<f32>::new(ModelConfig::tiny(), 11).unwrap();
    let b = UniRes::<f32>::new(ModelConfig::tiny(), 11).unwrap();
    let (pa, ta) = a.forward(&img, &t).unwrap();
    let (pb, _) = b.forward(&img, &t).unwrap();
    assert_eq!(pa, pb);
    assert_eq!((pa.width(), pa.height()), (40, 40));
    assert!(pa.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!((ta.mask_logits.width(), ta.mask_logits.height()), (4, 4));
    assert_eq!(ta.text_features.shape(), (17, 16));
    assert_eq!(ta.selected_regions.shape(), (6, 16));
}

#[test]
fn pad_tokens_do_not_leak() {
    let m = tiny();
    let v = vocab();
    let t = tokenize("head of the cat", &v, 17).unwrap();
    let mut t2 = t.clone();
    for id in t2.ids.iter_mut().skip(t.true_length) {
        *id = 7;
    }
    let a = m.text_encode(&t).unwrap();
    let b = m.text_encode(&t2).unwrap();
    assert!(a.per_token.max_abs_diff(&b.per_token) < 1e-12);
    assert!(a.sentence.max_abs_diff(&b.sentence) < 1e-12);
    assert_eq!(a.per_token.shape(), (17, 16));
}

#[test]
fn out_of_range_token_is_rejected() {
    let m = tiny();
    let mut t = tokenize("dog", &vocab(), 17).unwrap();
    t.ids[1] = 999;
    assert!(matches!(m.text_encode(&t), Err(ModelError::TokenOutOfRange { .. })));
}

#[test]
fn lrf_attention_is_row_stochastic() {
    let m = tiny();
    let t = tokenize("blue car wheel", &vocab(), 17).unwrap();
    let (_, trace) = m.forward(&random_image(32, 2), &t).unwrap();
    for attn in [trace.low_attention.unwrap(), trace.high_attention.unwrap()] {
        assert_eq!(attn.rows(), 1);
        assert!((attn.sum() - 1.0).abs() < 1e-5);
    }
    let regions = m.lrf_select(
        trace.low_group_out.as_ref(),
        trace.high_group_out.as_ref(),
        &trace.sentence_feature,
    );
    assert_eq!(regions.rows(), 6);
    assert!(regions.max_abs_diff(&trace.selected_regions) < 1e-12);
}

#[test]
fn stage_two_is_live() {
    let m = tiny();
    let t = tokenize("the red dog", &vocab(), 17).unwrap();
    let (_, trace) = m.forward(&random_image(32, 5), &t).unwrap();
    let valid = t.valid_mask();
    let live = m.decode(&trace.patch_features, &trace.text_features, &valid, &trace.selected_regions);
    assert_eq!(live, trace.mask_logits);
    let zeros = Matrix::zeros(6, 16);
    let ablated = m.decode(&trace.patch_features, &trace.text_features, &valid, &zeros);
    let diff: f32 = live.data().iter().zip(ablated.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "zeroed regions left the mask unchanged");
}

#[test]
fn group_assignment_properties() {
    let m = UniRes::<f64>::new(ModelConfig::default_groups_tiny(), 4).unwrap();
    let t = tokenize("the red dog", &vocab(), 17).unwrap();
    let img = random_image(32, 3);
    let (_, trace) = m.forward(&img, &t).unwrap();
    let low = group_assignment(&trace, GroupLevel::Low).unwrap();
    assert_eq!(low.values.len(), 16);
    assert!(low.values.iter().all(|&v| v < 64));
    for tau in [0.01, 0.5, 3.0, 100.0] {
        assert_eq!(group_assignment_tempered(&trace, GroupLevel::Low, tau).unwrap(), low);
    }
    let (_, again) = m.forward(&img, &t).unwrap();
    assert_eq!(group_assignment(&again, GroupLevel::High).unwrap(), group_assignment(&trace, GroupLevel::High).unwrap());
    assert_eq!(low.to_csv().lines().count(), 4);
}

#[test]
fn constant_image_groups_are_concentrated() {
    let cfg = ModelConfig {
        image_size: 64,
        ..ModelConfig::default_groups_tiny()
    };
    let m = UniRes::<f64>::new(cfg, 8).unwrap();
    let t = tokenize("the red dog", &vocab(), 17).unwrap();
    let img = image::RgbImage::from_pixel(64, 64, image::Rgb([90, 140, 200]));
    let (_, trace) = m.forward(&img, &t).unwrap();
    let a = group_assignment(&trace, GroupLevel::Low).unwrap();

    // Reference: uniform random assignment of the same number of patches.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trials = 200;
    let random_entropy: f64 = (0..trials)
        .map(|_| {
            let vals: Vec<u32> = (0..a.values.len()).map(|_| rng.random_range(0..64)).collect();
            histogram_entropy(&vals, 64)
        })
        .sum::<f64>()
        / trials as f64;
    assert!(a.entropy() < random_entropy, "{} vs {}", a.entropy(), random_entropy);
}

#[test]
fn disabled_bank_has_no_assignment() {
    let mut cfg = ModelConfig::tiny();
    cfg.n_high_group = 0;
    let m = UniRes::<f64>::new(cfg, 0).unwrap();
    let t = tokenize("dog", &vocab(), 17).unwrap();
    let (_, trace) = m.forward(&random_image(32, 1), &t).unwrap();
    assert!(trace.high_group_out.is_none());
    assert_eq!(trace.selected_regions.rows(), 4);
    assert!(matches!(group_assignment(&trace, GroupLevel::High), Err(ModelError::DisabledBank(_))));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let m = UniRes::<f32>::new(ModelConfig::tiny(), 21).unwrap();
    let v = vocab();
    save_checkpoint(&path, &Checkpoint::from_model(&m, Some(&v))).unwrap();
    let (back, ckpt) = load_checkpoint::<f32>(&path, Some(&ModelConfig::tiny())).unwrap();
    let t = tokenize("the red dog", ckpt.vocab.as_ref().unwrap(), 17).unwrap();
    let img = random_image(32, 4);
    assert_eq!(m.forward(&img, &t).unwrap().0, back.forward(&img, &t).unwrap().0);

    let mut other = ModelConfig::tiny();
    other.n_low_group = 3;
    assert!(matches!(
        load_checkpoint::<f32>(&path, Some(&other)),
        Err(ModelError::ConfigMismatch(_))
    ));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let m = UniRes::<f64>::new(ModelConfig::tiny(), 2).unwrap();
    let mut c = Checkpoint::from_model(&m, None);
    c.params.pop();
    save_checkpoint(&path, &c).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path, None), Err(ModelError::Checkpoint(_))));
}

#[test]
fn import_maps_and_transposes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Matrix<f64> = layers::normal_matrix(&mut rng, 1, 16, 1.0);
    let proj: Matrix<f64> = layers::normal_matrix(&mut rng, 16, 192, 1.0);
    let tensors = serde_json::json!({"tensors": [
        {"name": "visual.ln_post.weight", "shape": [1, 16], "data": w.data()},
        {"name": "visual.conv1.weight", "shape": [16, 192], "data": proj.data()},
        {"name": "logit_scale", "shape": [1, 1], "data": [4.6]},
    ]});
    std::fs::write(dir.path().join("t.json"), tensors.to_string()).unwrap();
    let manifest = serde_json::json!({
        "tensors": "t.json",
        "map": {"visual.ln_post.weight": "visual.norm.gamma", "visual.conv1.weight": "visual.patch_embed.weight"},
        "transpose": ["visual.conv1.weight"],
    });
    let mpath = dir.path().join("manifest.json");
    std::fs::write(&mpath, manifest.to_string()).unwrap();

    let mut m = tiny();
    let report = import_weights(&mut m, &mpath).unwrap();
    assert_eq!(report.imported.len(), 2);
    assert_eq!(report.unused, vec!["logit_scale".to_string()]);
    let gamma = m.params().value(m.params().find("visual.norm.gamma").unwrap());
    assert_eq!(gamma, &w);
    let pe = m.params().value(m.params().find("visual.patch_embed.weight").unwrap());
    assert_eq!(pe, &proj.transpose());
}

#[test]
fn import_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("t.json"),
        r#"{"tensors":[{"name":"x","shape":[1,3],"data":[1,2,3]}]}"#,
    )
    .unwrap();
    let mpath = dir.path().join("m.json");
    std::fs::write(&mpath, r#"{"tensors":"t.json","map":{"x":"visual.norm.gamma"}}"#).unwrap();
    let mut m = tiny();
    assert!(matches!(import_weights(&mut m, &mpath), Err(ModelError::ShapeMismatch(_))));
}
