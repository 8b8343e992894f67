use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::belief::compute_frequencies;
use crate::data::{gen_synthetic, SynthSpec};
use crate::embeddings::EmbeddingSource;
use crate::model::ModelConfig;
use crate::params::{ParamRegistry, ParamStore};

fn toy() -> (Model, EmbeddingTable, FrequencyTables, Corpus) {
    let corpus = gen_synthetic(SynthSpec { domains: 2, slots: 2, values: 3 }, 6, 2);
    let table = corpus.vocabulary().build_table(&EmbeddingSource::Pseudo { dim: 8, seed: 3 }).unwrap();
    let config = ModelConfig { d_m: 8, d_e: 8, dropout: 0.1, ..ModelConfig::default() };
    let model = Model::new(config, 4).unwrap();
    let freq = compute_frequencies(corpus.labels());
    (model, table, freq, corpus)
}

fn scalar_store(w: f64) -> ParamStore {
    let mut reg = ParamRegistry::new();
    reg.bias("w", 1);
    ParamStore::from_parts(reg.into_specs(), vec![Tensor::vector(vec![w])])
}

#[test]
fn clip_examples() {
    let mut g = vec![Tensor::vector(vec![0.6, 0.8])];
    assert_eq!(clip_gradients(&mut g, 2.0), 1.0);
    assert_eq!(g[0].data(), &[0.6, 0.8]);
    let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
    assert_eq!(clip_gradients(&mut g, 2.0), 5.0);
    assert!((g[0].data()[0] - 1.2).abs() < 1e-15);
    assert!((g[1].data()[0] - 1.6).abs() < 1e-15);
}

proptest! {
    #[test]
    fn clipped_norm_within_bound(xs in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..10.0) {
        let mut g = vec![Tensor::vector(xs)];
        clip_gradients(&mut g, max);
        prop_assert!(g[0].l2_norm_sq().sqrt() <= max + 1e-9);
    }
}

#[test]
fn zero_gradients_leave_parameters() {
    for kind in [OptimizerKind::Adam, OptimizerKind::Amsgrad] {
        let mut p = scalar_store(0.7);
        let mut s = OptimizerState::new(kind, &p);
        for _ in 0..5 {
            s.step(&mut p, &[Tensor::vector(vec![0.0])], 0.1).unwrap();
        }
        assert_eq!(p.values()[0].data(), &[0.7]);
    }
}

#[test]
fn adam_minimizes_quadratic() {
    let mut p = scalar_store(1.0);
    let mut s = OptimizerState::new(OptimizerKind::Adam, &p);
    for _ in 0..100 {
        let w = p.values()[0].data()[0];
        s.step(&mut p, &[Tensor::vector(vec![2.0 * w])], 0.1).unwrap();
    }
    assert!(p.values()[0].data()[0].abs() < 0.05, "{}", p.values()[0].data()[0]);
}

#[test]
fn amsgrad_maximum_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reg = ParamRegistry::new();
    reg.weight("w", 3, 2);
    let mut p = ParamStore::from_parts(reg.into_specs(), vec![Tensor::zeros(&[3, 2])]);
    let mut s = OptimizerState::new(OptimizerKind::Amsgrad, &p);
    let mut prev = s.v_max[0].clone();
    for _ in 0..1000 {
        let scale = rng.random_range(0.0..5.0);
        let g = Tensor::matrix(3, 2, (0..6).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        s.step(&mut p, &[g], 0.01).unwrap();
        for (a, b) in prev.data().iter().zip(s.v_max[0].data()) {
            assert!(b >= a);
        }
        prev = s.v_max[0].clone();
    }
}

#[test]
fn adam_first_step_matches_formula() {
    let mut p = scalar_store(1.0);
    let mut s = OptimizerState::new(OptimizerKind::Adam, &p);
    s.step(&mut p, &[Tensor::vector(vec![0.5])], 0.01).unwrap();
    let m_hat = 0.5;
    let v_hat = 0.25;
    let expected = 1.0 - 0.01 * m_hat / (f64::sqrt(v_hat) + EPSILON);
    assert!((p.values()[0].data()[0] - expected).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut p = scalar_store(1.0);
    let mut s = OptimizerState::new(OptimizerKind::Adam, &p);
    let err = s.step(&mut p, &[Tensor::vector(vec![f64::NAN])], 0.1).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGradient(ref n) if n == "w"));
    assert_eq!(s.t, 0);
    assert_eq!(p.values()[0].data(), &[1.0]);
}

#[test]
fn empty_gold_scores_one_terminator() {
    let (model, table, _, _) = toy();
    let vocab = OutputVocabulary::new(&table, model.config.output_mode);
    let ex = Example { input: TurnInput::default(), gold: BeliefState::new() };
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let (loss, steps) = loss_turn(&mut g, &model, &table, &vocab, &p, &ex, &mut Pass::Eval).unwrap();
    assert_eq!(steps.len(), 1);
    assert_eq!(steps[0].level, Level::Domain);
    assert_eq!(g.value(loss).data()[0], steps[0].ce);
}

#[test]
fn loss_equals_recomputed_step_sum() {
    let (model, table, freq, corpus) = toy();
    let vocab = OutputVocabulary::new(&table, model.config.output_mode);
    for ex in examples(&corpus, &freq).iter().take(8) {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let (loss, steps) = loss_turn(&mut g, &model, &table, &vocab, &p, ex, &mut Pass::Eval).unwrap();
        let value_tokens: usize = ex.gold.triplets().iter().map(|t| t.value.len()).sum();
        let expected_steps = 1 + 2 * ex.gold.domains().count() + 2 * ex.gold.len() + value_tokens;
        assert_eq!(steps.len(), expected_steps);
        let recomputed: f64 = steps.iter().map(|s| -s.probs[s.target].ln()).sum();
        let value = g.value(loss).data()[0];
        assert!(value >= 0.0);
        assert!((value - recomputed).abs() <= 1e-9 * value.max(1.0), "{value} vs {recomputed}");
    }
}

#[test]
fn batch_loss_is_mean_of_turn_losses() {
    let (model, table, freq, corpus) = toy();
    let vocab = OutputVocabulary::new(&table, model.config.output_mode);
    let data = examples(&corpus, &freq);
    let batch: Vec<&Example> = data.iter().take(5).collect();
    let (mean, grads) = batch_gradients(&model, &table, &vocab, &batch, None).unwrap();
    let mut losses = Vec::new();
    let mut sum_grad = 0.0;
    for ex in &batch {
        let (l, g) = turn_gradients(&model, &table, &vocab, ex, None).unwrap();
        losses.push(l);
        sum_grad += g[0].data()[0];
    }
    let expected = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((mean - expected).abs() <= 1e-10);
    assert!((grads[0].data()[0] - sum_grad / 5.0).abs() <= 1e-12);
}

#[test]
fn examples_feed_gold_previous_state() {
    let (_, _, freq, corpus) = toy();
    let data = examples(&corpus, &freq);
    assert_eq!(data.len(), corpus.num_turns());
    let d = &corpus.dialogues[0];
    assert!(data[0].input.previous.is_empty());
    if d.turns.len() > 1 {
        assert!(data[1].input.previous.identical(&canonical_order(&d.turns[0].belief, &freq)));
    }
}

#[test]
fn small_step_changes_loss_first_order() {
    let (model, table, freq, corpus) = toy();
    let vocab = OutputVocabulary::new(&table, model.config.output_mode);
    let data = examples(&corpus, &freq);
    let batch: Vec<&Example> = data.iter().take(4).collect();
    let (base, grads) = batch_gradients(&model, &table, &vocab, &batch, None).unwrap();
    let delta = |lr: f64| {
        let mut m = model.clone();
        let mut s = OptimizerState::new(OptimizerKind::Adam, &m.params);
        s.step(&mut m.params, &grads, lr).unwrap();
        batch_gradients(&m, &table, &vocab, &batch, None).unwrap().0 - base
    };
    let d1 = delta(1e-5);
    let d2 = delta(1e-6);
    assert!(d1 < 0.0 && d2 < 0.0);
    assert!((d1 / d2 - 10.0).abs() < 0.5, "{d1} {d2}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let (model, table, freq, corpus) = toy();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let out = train(model.clone(), &cfg, &corpus, &corpus, &table, &freq, |_, _| true).unwrap();
    assert_eq!(out.best, model);
    assert_eq!(out.best_epoch, 0);
    assert!(out.history.is_empty());
}

#[test]
fn empty_training_set_is_rejected() {
    let (model, table, freq, _) = toy();
    let err = train(model, &TrainConfig::default(), &Corpus::default(), &Corpus::default(), &table, &freq, |_, _| true);
    assert!(matches!(err, Err(TrainError::EmptyDataset)));
}

#[test]
fn first_batch_loss_decreases() {
    let (mut model, table, freq, corpus) = toy();
    let vocab = OutputVocabulary::new(&table, model.config.output_mode);
    let data = examples(&corpus, &freq);
    let batch: Vec<&Example> = data.iter().take(8).collect();
    let initial = batch_gradients(&model, &table, &vocab, &batch, None).unwrap().0;
    let mut s = OptimizerState::new(OptimizerKind::Adam, &model.params);
    let mut best = initial;
    for _ in 0..20 {
        let (l, mut g) = batch_gradients(&model, &table, &vocab, &batch, None).unwrap();
        best = best.min(l);
        clip_gradients(&mut g, 2.0);
        s.step(&mut model.params, &g, 0.01).unwrap();
    }
    assert!(best < initial, "{best} !< {initial}");
}

#[test]
fn training_is_deterministic_and_reports_ordered_metrics() {
    let (model, table, freq, corpus) = toy();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, lr: 0.01, seed: 9, ..TrainConfig::default() };
    let run = || train(model.clone(), &cfg, &corpus, &corpus, &table, &freq, |_, _| true).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.last, b.last);
    assert_eq!(a.history.len(), 2);
    for e in &a.history {
        let v = e.valid.unwrap();
        assert!(v.jg <= v.jds && v.jds <= v.jd);
    }
    let mut stopped = 0;
    let c = train(model.clone(), &cfg, &corpus, &Corpus::default(), &table, &freq, |_, _| {
        stopped += 1;
        false
    })
    .unwrap();
    assert_eq!((stopped, c.history.len(), c.best_epoch), (1, 1, 1));
}

fn checkpoint_for(model: Model, freq: FrequencyTables, corpus: &Corpus) -> Checkpoint {
    Checkpoint {
        model,
        seed: 4,
        epoch: 0,
        metric: None,
        vocabulary: corpus.vocabulary(),
        embeddings: EmbeddingSpec::Pseudo { dim: 8, seed: 3 },
        frequencies: freq,
    }
}

#[test]
fn checkpoint_round_trip_and_tamper() {
    let (model, table, freq, corpus) = toy();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 0.01, ..TrainConfig::default() };
    let trained = train(model, &cfg, &corpus, &corpus, &table, &freq, |_, _| true).unwrap();
    let ck = checkpoint_for(trained.best.clone(), freq.clone(), &corpus);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.table(None).unwrap(), table);

    let before = evaluate(&Tracker::new(&ck.model, &table, &freq), &corpus, StateFeed::Predicted).unwrap();
    let after = evaluate(&Tracker::new(&loaded.model, &table, &freq), &corpus, StateFeed::Predicted).unwrap();
    assert_eq!(before.0, after.0);
    assert_eq!(before.1, after.1);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    assert!(matches!(parse_checkpoint(&bytes), Err(CheckpointError::Checksum { .. })));
    assert!(matches!(parse_checkpoint(b"{}"), Err(CheckpointError::Format(_))));
}

#[test]
fn checkpoint_bytes_are_deterministic() {
    let (model, _, freq, corpus) = toy();
    let a = checkpoint_bytes(&checkpoint_for(model.clone(), freq.clone(), &corpus)).unwrap();
    let again = Model::new(model.config.clone(), 4).unwrap();
    let b = checkpoint_bytes(&checkpoint_for(again, freq, &corpus)).unwrap();
    assert_eq!(a, b);
}
