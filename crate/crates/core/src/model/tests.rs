use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{build_char_vocab, build_word_vocab, tokenize_pairs, BatchConfig, RawPair, TokenizedPair};
use crate::tensor::Fault;

fn corpus() -> Vec<RawPair> {
    [
        (1, "the cat sat down", "a cat sat"),
        (0, "dogs bark loudly", "birds fly south today"),
        (1, "red fox", "the red fox jumps"),
    ]
    .iter()
    .map(|&(label, a, b)| RawPair {
        label,
        a: a.into(),
        b: b.into(),
        group: None,
    })
    .collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        word_dim: 6,
        char_dim: 3,
        char_hidden: 3,
        char_out: Some(4),
        encoder_hidden: 4,
        stack_depth: 2,
        agg_hidden: Some(3),
        prediction_hidden: 5,
        dropout: 0.0,
        ..Default::default()
    }
}

fn model<T: Scalar>(config: ModelConfig, seed: u64) -> (CsranModel<T>, Vec<TokenizedPair>) {
    let raw = corpus();
    let words = build_word_vocab(&raw, 1);
    let chars = build_char_vocab(&raw);
    let pairs = tokenize_pairs(&raw, &words, &chars);
    (CsranModel::new(config, words, chars, seed).unwrap(), pairs)
}

fn batch(pairs: &[&TokenizedPair]) -> Batch {
    Batch::from_pairs(pairs, &BatchConfig::default(), &mut 0)
}

#[test]
fn loss_examples() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::zeros([2, 3]));
    let l = loss(&mut g, uniform, &[0, 2]).unwrap();
    assert!((g.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-15);

    let logits = g.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let l = loss(&mut g, logits, &[1]).unwrap();
    assert!((g.value(l).item().unwrap() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
    assert!((g.value(l).item().unwrap() - 0.3133).abs() < 1e-4);

    let sure = g.constant(Tensor::from_f64([1, 2], &[-50.0, 50.0]).unwrap());
    let l = loss(&mut g, sure, &[1]).unwrap();
    let v = g.value(l).item().unwrap();
    assert!((0.0..1e-40).contains(&v));

    assert!(matches!(loss(&mut g, logits, &[2]), Err(Error::Data(_))));
}

#[test]
fn prediction_examples() {
    let logits = Tensor::<f64>::from_f64([2, 2], &[0.1, 2.0, 0.0, 0.0]).unwrap();
    assert_eq!(predict_classes(&logits), vec![1, 0]);
    assert_eq!(ranking_scores(&logits)[1], 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..500 {
        let (x, y, shift) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let margins = Tensor::<f64>::from_f64([2, 2], &[0.0, x, shift, shift + y]).unwrap();
        let s = ranking_scores(&margins);
        assert_eq!(x < y, s[0] < s[1], "{x} {y} {s:?}");
    }
}

#[test]
fn config_validation_names_the_field() {
    let bad = [
        ModelConfig { stack_depth: 0, ..Default::default() },
        ModelConfig { agg_depth: 3, ..Default::default() },
        ModelConfig { prediction_layers: 4, ..Default::default() },
        ModelConfig { num_classes: 1, ..Default::default() },
        ModelConfig { dropout: 1.0, ..Default::default() },
        ModelConfig { word_dim: 0, ..Default::default() },
    ];
    let fields = ["stack_depth", "agg_depth", "prediction_layers", "num_classes", "dropout", "word_dim"];
    for (cfg, want) in bad.iter().zip(fields) {
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, want),
            other => panic!("{other:?}"),
        }
    }
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn logits_shape_for_every_ablation() {
    for (mar, csra, k) in [(true, true, 2), (false, true, 2), (true, false, 3), (false, false, 1)] {
        let cfg = ModelConfig { use_mar: mar, use_csra: csra, stack_depth: k, num_classes: 3, ..tiny_config() };
        let (m, pairs) = model::<f64>(cfg, 1);
        let b = batch(&pairs.iter().collect::<Vec<_>>());
        let logits = m.logits(&b).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn parameter_counts_follow_ablations() {
    let count = |mar, csra| {
        let (m, _) = model::<f32>(ModelConfig { use_mar: mar, use_csra: csra, ..tiny_config() }, 0);
        let cafe = m.params.iter().filter(|(_, p)| param_group(&p.name) == "cafe").count();
        (m.parameter_count(), cafe)
    };
    let (original, cafe) = count(true, true);
    let (no_mar, no_mar_cafe) = count(false, true);
    let (no_csra, _) = count(true, false);
    assert!(cafe > 0 && no_mar_cafe == 0);
    assert!(no_mar < original);
    assert_eq!(no_csra, original);
}

#[test]
fn swapping_sequences_swaps_feature_halves() {
    let (m, pairs) = model::<f64>(tiny_config(), 2);
    let p = &pairs[0];
    let swapped = TokenizedPair {
        a_words: p.b_words.clone(),
        b_words: p.a_words.clone(),
        a_chars: p.b_chars.clone(),
        b_chars: p.a_chars.clone(),
        ..p.clone()
    };
    let features = |b: &Batch| {
        let mut g = Graph::with_params(&m.params);
        let out = m.net.forward::<f64, ChaCha8Rng>(&mut g, b, None).unwrap();
        g.value(out.features).clone()
    };
    let z = features(&batch(&[p]));
    let zs = features(&batch(&[&swapped]));
    let half = z.len() / 2;
    assert_eq!(&z.data()[..half], &zs.data()[half..]);
    assert_eq!(&z.data()[half..], &zs.data()[..half]);
}

fn padding_gap<T: Scalar>() -> f64 {
    let (m, pairs) = model::<T>(tiny_config(), 3);
    // pairs[2].a is two words shorter than pairs[0].a, so batching pads it
    let alone = m.logits(&batch(&[&pairs[2]])).unwrap();
    let padded = m.logits(&batch(&[&pairs[0], &pairs[2]])).unwrap();
    assert!(batch(&[&pairs[0], &pairs[2]]).a.mask[1].contains(&false));
    alone
        .row(0)
        .iter()
        .zip(padded.row(1))
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn padding_does_not_change_logits() {
    assert!(padding_gap::<f64>() <= 1e-10);
    assert!(padding_gap::<f32>() <= 1e-6);
}

#[test]
fn construction_and_dropout_are_seeded() {
    let cfg = ModelConfig { dropout: 0.3, ..tiny_config() };
    let (m1, pairs) = model::<f64>(cfg.clone(), 7);
    let (m2, _) = model::<f64>(cfg, 7);
    let b = batch(&pairs.iter().collect::<Vec<_>>());
    let run = |m: &CsranModel<f64>, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.loss_and_grads(&b, Some(&mut rng)).unwrap().0
    };
    assert_eq!(run(&m1, 1), run(&m2, 1));
    assert_ne!(run(&m1, 1), run(&m1, 2));
    assert_eq!(m1.logits(&b).unwrap(), m2.logits(&b).unwrap());
}

fn round_trip<T: Scalar>() {
    let (m, pairs) = model::<T>(tiny_config(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    assert_eq!(peek_precision(&path).unwrap(), Precision::of::<T>());
    let back = CsranModel::<T>::load(&path).unwrap();
    let b = batch(&pairs.iter().collect::<Vec<_>>());
    assert_eq!(m.logits(&b).unwrap(), back.logits(&b).unwrap());
    assert_eq!(back.words, m.words);
    assert_eq!(back.config, m.config);
    for ((_, p), (_, q)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value, q.value);
        assert_eq!(p.frozen_rows, q.frozen_rows);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    round_trip::<f32>();
    round_trip::<f64>();
    let (m, _) = model::<f32>(tiny_config(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    assert!(matches!(CsranModel::<f64>::load(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, r#"{"format":"other","version":1,"precision":"f32"}"#).unwrap();
    assert!(matches!(peek_precision(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn full_model_passes_grad_check() {
    let cfg = ModelConfig { word_dim: 4, char_out: Some(3), encoder_hidden: 3, prediction_hidden: 8, ..tiny_config() };
    let (mut m, pairs) = model::<f64>(cfg, 5);
    let b = batch(&[&pairs[0], &pairs[2]]);
    let report = check_gradients(&mut m, &b, None).unwrap();
    let groups: Vec<&str> = report.iter().map(|r| r.group).collect();
    assert_eq!(groups, GRADIENT_GROUPS);
    for r in &report {
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn grad_check_catches_a_broken_backward_rule() {
    let cfg = ModelConfig { word_dim: 4, use_chars: false, encoder_hidden: 3, stack_depth: 1, prediction_hidden: 8, ..tiny_config() };
    let (mut m, pairs) = model::<f64>(cfg, 5);
    let b = batch(&[&pairs[0], &pairs[2]]);
    let report = check_gradients(&mut m, &b, Some(Fault::Lstm)).unwrap();
    assert!(report.iter().any(|r| !r.passed()));
    assert!(report.iter().filter(|r| r.group == "aggregation").all(|r| r.max_relative_error > 0.1));
}
