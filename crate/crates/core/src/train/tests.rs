use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{build_char_vocab, build_word_vocab, gen_synthetic, tokenize_pairs, SyntheticKind};
use crate::model::ModelConfig;
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};

fn grads_for(store: &ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Var) -> Gradients<f64> {
    let mut g = Graph::with_params(store);
    let loss = f(&mut g);
    g.backward(loss).unwrap();
    g.param_grads()
}

#[test]
fn adam_matches_scalar_recurrence() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![0.5f64]));
    let cfg = AdamConfig {
        lr: 0.01,
        ..Default::default()
    };
    let mut adam = Adam::new(cfg);
    // loss = 3 w: constant gradient 3
    let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for t in 1..=25 {
        let grads = grads_for(&store, |g| {
            let p = g.param(w);
            let s = g.sum_all(p);
            g.scale(s, 3.0)
        });
        adam.step(&mut store, &grads).unwrap();
        m = 0.9 * m + (1.0 - 0.9) * 3.0;
        v = 0.999 * v + (1.0 - 0.999) * 3.0 * 3.0;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        theta -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert_eq!(store.value(w).data()[0], theta, "step {t}");
    }
    assert_eq!(adam.steps(), 25);
}

#[test]
fn adam_zero_gradient_and_zero_lr() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0f64, -2.0]));
    let grad_of = |store: &ParamStore<f64>, c: f64| {
        grads_for(store, |g| {
            let p = g.param(w);
            let s = g.sum_all(p);
            g.scale(s, c)
        })
    };
    let mut adam = Adam::new(AdamConfig::default());
    let grads = grad_of(&store, 0.0);
    adam.step(&mut store, &grads).unwrap();
    assert_eq!(store.value(w).data(), &[1.0, -2.0]);

    let grads = grad_of(&store, 1.0);
    adam.step(&mut store, &grads).unwrap();
    let m1 = adam.moments(w).unwrap().0.data().to_vec();
    let v1 = adam.moments(w).unwrap().1.data().to_vec();
    let grads = grad_of(&store, 0.0);
    adam.step(&mut store, &grads).unwrap();
    let (m2, v2) = adam.moments(w).unwrap();
    for i in 0..2 {
        assert_eq!(m2.data()[i], 0.9 * m1[i]);
        assert_eq!(v2.data()[i], 0.999 * v1[i]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let before = store.value(w).clone();
    let mut frozen = Adam::new(AdamConfig {
        lr: 0.0,
        ..Default::default()
    });
    for _ in 0..20 {
        let c = rng.gen_range(-100.0..100.0);
        let grads = grad_of(&store, c);
        frozen.step(&mut store, &grads).unwrap();
    }
    assert_eq!(store.value(w), &before);
}

#[test]
fn adam_respects_frozen_state_and_shapes() {
    let mut store = ParamStore::new();
    let table = store.add("table", Tensor::from_f64([3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let fixed = store.add("fixed", Tensor::vector(vec![7.0f64]));
    store.get_mut(table).frozen_rows = Some(vec![false, true, false]);
    store.get_mut(fixed).trainable = false;
    let grads = grads_for(&store, |g| {
        let t = g.param(table);
        let f = g.param(fixed);
        let a = g.sum_all(t);
        let b = g.sum_all(f);
        g.add(a, b).unwrap()
    });
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut store, &grads).unwrap();
    let t = store.value(table).data();
    assert_eq!(&t[2..4], &[3.0, 4.0]);
    assert!(t[0] < 1.0 && t[5] < 6.0);
    assert_eq!(store.value(fixed).data(), &[7.0]);
    assert!(adam.moments(fixed).is_none());
    assert_eq!(&adam.moments(table).unwrap().0.data()[2..4], &[0.0, 0.0]);

    let mut other = ParamStore::new();
    other.add("table", Tensor::<f64>::zeros([2, 3]));
    assert!(matches!(adam.step(&mut other, &grads), Err(Error::Contract(_))));
}

#[test]
fn clipping_and_masking() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::from_f64([2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap());
    store.get_mut(a).frozen_rows = Some(vec![true, false]);
    let mut grads = grads_for(&store, |g| {
        let p = g.param(a);
        let s = g.sum_all(p);
        g.scale(s, 3.0)
    });
    mask_untrainable(&store, &mut grads);
    assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0, 3.0, 3.0]);
    let norm = clip_global_norm(&mut grads, 1.0);
    assert!((norm - 18f64.sqrt()).abs() < 1e-12);
    assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    let unchanged = grads.clone();
    clip_global_norm(&mut grads, 5.0);
    assert_eq!(grads.get(a), unchanged.get(a));
}

#[test]
fn metric_worked_examples() {
    assert_eq!(accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap(), 2.0 / 3.0);
    assert_eq!(accuracy(&[2, 0], &[2, 0]).unwrap(), 1.0);
    assert!(matches!(accuracy(&[], &[]), Err(Error::Data(_))));

    // TP=2, FP=1, FN=1
    assert_eq!(f1_binary(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0], 1), 2.0 / 3.0);
    assert_eq!(f1_binary(&[1, 0], &[1, 0], 1), 1.0);
    assert_eq!(f1_binary(&[0, 0], &[0, 0], 1), 0.0);

    let g = ScoredGroup {
        scores: vec![0.9, 0.5, 0.1],
        relevant: vec![true, false, true],
    };
    let mm = map_mrr(&[g]).unwrap();
    // (1 + 2/3) / 2 in floating point would land one ulp below
    assert_eq!(mm.map, 5.0 / 6.0);
    assert_eq!(mm.mrr, 1.0);

    let mut scores: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
    scores.swap(0, 7);
    let mut relevant = vec![false; 10];
    relevant[1] = true;
    let r = recall_at_k(&[ScoredGroup { scores, relevant }], &[1, 2, 5, 10, 20]).unwrap();
    assert_eq!(r.values, vec![(1, 0.0), (2, 1.0), (5, 1.0), (10, 1.0), (20, 1.0)]);

    let all = ScoredGroup {
        scores: vec![0.3, 0.3, 0.1],
        relevant: vec![true; 3],
    };
    let none = ScoredGroup {
        scores: vec![0.2],
        relevant: vec![false],
    };
    let mm = map_mrr(&[all, none.clone()]).unwrap();
    assert_eq!((mm.map, mm.mrr, mm.excluded), (1.0, 1.0, 1));
    assert!(matches!(map_mrr(&[]), Err(Error::Data(_))));
    assert!(matches!(map_mrr(&[none]), Err(Error::Data(_))));
}

#[test]
fn ties_keep_input_order() {
    let g = ScoredGroup {
        scores: vec![0.5, 0.5, 0.5],
        relevant: vec![false, true, false],
    };
    let mm = map_mrr(&[g]).unwrap();
    assert_eq!((mm.map, mm.mrr), (0.5, 0.5));
}

/// Rank of candidate `i` counted directly: better scores, then earlier ties.
fn rank_of(g: &ScoredGroup, i: usize) -> usize {
    1 + (0..g.scores.len())
        .filter(|&j| g.scores[j] > g.scores[i] || (g.scores[j] == g.scores[i] && j < i))
        .count()
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact fraction sum, reduced as it goes.
fn add(f: (u128, u128), n: u128, d: u128) -> (u128, u128) {
    let (num, den) = (f.0 * d + n * f.1, f.1 * d);
    let g = gcd(num, den);
    (num / g, den / g)
}

fn brute_map_mrr(groups: &[ScoredGroup]) -> (f64, f64) {
    let (mut ap_sum, mut rr_sum, mut used) = ((0, 1), (0, 1), 0);
    for g in groups {
        let mut rel_ranks: Vec<usize> = (0..g.scores.len()).filter(|&i| g.relevant[i]).map(|i| rank_of(g, i)).collect();
        if rel_ranks.is_empty() {
            continue;
        }
        rel_ranks.sort_unstable();
        let mut p_sum = (0, 1);
        for &r in &rel_ranks {
            let above = rel_ranks.iter().filter(|&&q| q <= r).count();
            p_sum = add(p_sum, above as u128, r as u128);
        }
        ap_sum = add(ap_sum, p_sum.0, p_sum.1 * rel_ranks.len() as u128);
        rr_sum = add(rr_sum, 1, rel_ranks[0] as u128);
        used += 1;
    }
    // numerators and denominators stay below 2^53, so one division rounds correctly
    let mean = |f: (u128, u128)| f.0 as f64 / (f.1 * used) as f64;
    (mean(ap_sum), mean(rr_sum))
}

fn random_groups(rng: &mut ChaCha8Rng) -> Vec<ScoredGroup> {
    let n = rng.gen_range(1..6);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..8);
            ScoredGroup {
                // coarse scores so ties occur
                scores: (0..len).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect(),
                relevant: (0..len).map(|_| rng.gen_bool(0.4)).collect(),
            }
        })
        .collect()
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..500 {
        let n = rng.gen_range(1..30);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let mut correct = 0;
        for i in 0..n {
            if preds[i] == labels[i] {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&preds, &labels).unwrap(), correct as f64 / n as f64);

        let mut confusion = [[0usize; 2]; 2];
        for i in 0..n {
            confusion[usize::from(preds[i] == 1)][usize::from(labels[i] == 1)] += 1;
        }
        let (tp, fp, fneg) = (confusion[1][1], confusion[1][0], confusion[0][1]);
        let want = if tp == 0 {
            0.0
        } else {
            let (p, r) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fneg) as f64);
            let f = 2.0 * p * r / (p + r);
            assert!((f - (2 * tp) as f64 / (2 * tp + fp + fneg) as f64).abs() < 1e-15);
            (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
        };
        assert_eq!(f1_binary(&preds, &labels, 1), want);

        let groups = random_groups(&mut rng);
        let usable: Vec<&ScoredGroup> = groups.iter().filter(|g| g.relevant.contains(&true)).collect();
        if usable.is_empty() {
            assert!(map_mrr(&groups).is_err() && recall_at_k(&groups, &[1]).is_err());
            continue;
        }
        let mm = map_mrr(&groups).unwrap();
        assert_eq!((mm.map, mm.mrr), brute_map_mrr(&groups));
        assert_eq!(mm.excluded, groups.len() - usable.len());
        let ks = [1, 2, 5];
        let r = recall_at_k(&groups, &ks).unwrap();
        for (k, v) in r.values {
            let hit = usable
                .iter()
                .filter(|g| (0..g.scores.len()).any(|i| g.relevant[i] && rank_of(g, i) <= k))
                .count();
            assert_eq!(v, hit as f64 / usable.len() as f64);
        }
    }
}

#[test]
fn ranking_metrics_ignore_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let groups = random_groups(&mut rng);
        let Ok(base) = map_mrr(&groups) else { continue };
        let moved: Vec<ScoredGroup> = groups
            .iter()
            .map(|g| ScoredGroup {
                scores: g.scores.iter().map(|s| (3.0 * s).exp() - 10.0).collect(),
                relevant: g.relevant.clone(),
            })
            .collect();
        assert_eq!(map_mrr(&moved).unwrap(), base);
        assert_eq!(recall_at_k(&moved, &[1, 3]).unwrap(), recall_at_k(&groups, &[1, 3]).unwrap());
        let mut shuffled = groups.clone();
        shuffled.reverse();
        let s = map_mrr(&shuffled).unwrap();
        assert_eq!(s, base);
    }
}

fn tiny_setup(seed: u64) -> (CsranModel<f64>, Vec<TokenizedPair>) {
    let raw = gen_synthetic(SyntheticKind::Paraphrase, 24, 3);
    let words = build_word_vocab(&raw, 1);
    let chars = build_char_vocab(&raw);
    let pairs = tokenize_pairs(&raw, &words, &chars);
    let cfg = ModelConfig {
        word_dim: 6,
        use_chars: false,
        use_highway: false,
        encoder_hidden: 4,
        stack_depth: 2,
        prediction_hidden: 8,
        dropout: 0.2,
        ..Default::default()
    };
    (CsranModel::new(cfg, words, chars, seed).unwrap(), pairs)
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: BatchConfig {
            batch_size: 8,
            ..Default::default()
        },
        adam: AdamConfig {
            lr: 0.01,
            ..Default::default()
        },
        patience: None,
        timing: false,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let (mut m, pairs) = tiny_setup(1);
    let before = m.params.clone();
    let out = train(&mut m, &pairs, &pairs, TaskKind::Classification, &quick_config(0), |_| {}).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn training_is_reproducible_and_learns() {
    let run = || {
        let (mut m, pairs) = tiny_setup(2);
        let mut seen = Vec::new();
        let out = train(&mut m, &pairs, &pairs, TaskKind::Classification, &quick_config(6), |r| seen.push(*r)).unwrap();
        assert_eq!(seen, out.history);
        (out, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 6);
    for ((_, p), (_, q)) in ma.params.iter().zip(mb.params.iter()) {
        assert_eq!(p.value, q.value);
    }
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    let best = a.history.iter().map(|r| r.dev_metric).fold(f64::MIN, f64::max);
    assert_eq!(a.best_dev, Some(best));
    let (_, pairs) = tiny_setup(2);
    let report = evaluate(&ma, &pairs, TaskKind::Classification, &BatchConfig::default()).unwrap();
    assert_eq!(report.get("accuracy"), Some(best));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.tsv");
    write_history(&path, &a.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.split('\t').count() == 4 && l.ends_with("\t0.000")));
}

#[test]
fn early_stopping_and_non_finite_loss() {
    let (mut m, pairs) = tiny_setup(3);
    let cfg = TrainConfig {
        patience: Some(1),
        adam: AdamConfig {
            lr: 0.0,
            ..Default::default()
        },
        ..quick_config(10)
    };
    let out = train(&mut m, &pairs, &pairs, TaskKind::Classification, &cfg, |_| {}).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.len(), 2);

    let id = m.params.id("head.out.b").unwrap();
    m.params.get_mut(id).value.data_mut()[0] = f64::NAN;
    let err = train(&mut m, &pairs, &pairs, TaskKind::Classification, &quick_config(1), |_| {});
    assert!(matches!(err, Err(Error::NonFinite { epoch: 1, batch: 0, .. })));
}

#[test]
fn ranking_report_keys() {
    let raw = gen_synthetic(SyntheticKind::Ranking, 3, 1);
    let words = build_word_vocab(&raw, 1);
    let chars = build_char_vocab(&raw);
    let pairs = tokenize_pairs(&raw, &words, &chars);
    let m = CsranModel::<f32>::new(
        ModelConfig {
            word_dim: 4,
            encoder_hidden: 3,
            stack_depth: 1,
            prediction_hidden: 4,
            ..Default::default()
        },
        words,
        chars,
        0,
    )
    .unwrap();
    let report = evaluate(&m, &pairs, TaskKind::Ranking, &BatchConfig::default()).unwrap();
    let text = report.to_string();
    for key in ["task=ranking", "examples=30", "map=", "mrr=", "recall@1=", "recall@2=", "recall@5=", "accuracy="] {
        assert!(text.contains(key), "{text}");
    }
    for (_, v) in &report.values {
        assert!((0.0..=1.0).contains(v));
    }
}
