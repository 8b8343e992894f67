use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embeddings::{EmbeddingSource, Vocabulary};
use crate::model::ModelConfig;
use crate::params::grad_check_params;

fn config(d_m: usize, d_e: usize) -> ModelConfig {
    ModelConfig {
        d_m,
        d_e,
        dropout: 0.5,
        ..ModelConfig::default()
    }
}

fn table(d_e: usize, extra_words: usize) -> EmbeddingTable {
    let mut vocab = Vocabulary::default();
    vocab.words.extend(["cheap", "north", "food", "area", "train"].map(String::from));
    vocab.words.extend((0..extra_words).map(|i| format!("w{i}")));
    vocab.domains.extend(["restaurant", "train"].map(String::from));
    vocab.slots.extend(["food", "area", "price range"].map(String::from));
    vocab.build_table(&EmbeddingSource::Pseudo { dim: d_e, seed: 5 }).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Perturbs every parameter so biases are non-zero too.
fn jitter(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in model.params.values_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

struct Fixture {
    model: Model,
    table: EmbeddingTable,
    vocab: OutputVocabulary,
    memories: [Tensor; 3],
    q0: Tensor,
}

fn fixture(d_m: usize, d_e: usize, seed: u64) -> Fixture {
    let mut model = Model::new(config(d_m, d_e), seed).unwrap();
    jitter(&mut model, seed + 100);
    let table = table(d_e, 0);
    let vocab = OutputVocabulary::new(&table, OutputMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let memories = [
        random_matrix(&mut rng, 4, d_m),
        random_matrix(&mut rng, 3, d_m),
        random_matrix(&mut rng, 5, d_m),
    ];
    let q0 = random_vector(&mut rng, d_m);
    Fixture {
        model,
        table,
        vocab,
        memories,
        q0,
    }
}

fn context<'a>(g: &mut Graph, f: &'a Fixture, bound: &'a Bound) -> DecoderContext<'a> {
    let [b, s, u] = f.memories.clone().map(|m| g.constant(m));
    let q0 = g.constant(f.q0.clone());
    DecoderContext::new(
        g,
        &f.model,
        &f.table,
        &f.vocab,
        bound,
        Memories {
            belief: b,
            system: s,
            user: u,
        },
        q0,
    )
    .unwrap()
}

/// Plain-loop attention, independent of the tape.
fn attention_oracle(store: &ParamStore, c: &CmrdParams, h: &[f64], memory: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = c.d_m;
    let affine = |x: &[f64], w: ParamId, b: ParamId| -> Vec<f64> {
        let (w, b) = (store.get(w).data(), store.get(b).data());
        (0..d).map(|j| b[j] + (0..d).map(|i| x[i] * w[i * d + j]).sum::<f64>()).collect()
    };
    let a = affine(h, c.attn_w1, c.attn_b1);
    let l = memory.rows();
    let scores: Vec<f64> = (0..l).map(|t| memory.row(t).iter().zip(&a).map(|(x, y)| x * y).sum()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let read: Vec<f64> = (0..d).map(|j| (0..l).map(|t| weights[t] * memory.row(t)[j]).sum()).collect();
    (affine(&read, c.attn_w2, c.attn_b2), weights)
}

#[test]
fn attention_single_column_ignores_query() {
    let f = fixture(4, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let memory = random_matrix(&mut rng, 1, 4);
    let mut outs = Vec::new();
    for _ in 0..2 {
        let mut g = Graph::new();
        let p = f.model.params.bind(&mut g, false);
        let h = g.constant(random_vector(&mut rng, 4));
        let m = g.constant(memory.clone());
        let (out, w) = attention(&mut g, &p, &f.model.cmrd, h, m).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        outs.push(g.value(out).clone());
    }
    let (expected, _) = attention_oracle(&f.model.params, &f.model.cmrd, &[0.0; 4], &memory);
    for o in &outs {
        for (a, e) in o.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_identical_columns() {
    let f = fixture(4, 3, 2);
    let v = [0.3, -0.1, 0.7, 0.2];
    let memory = Tensor::from_rows(&vec![v.to_vec(); 3]).unwrap();
    let (expected, _) = attention_oracle(&f.model.params, &f.model.cmrd, &[0.0; 4], &memory);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let mut g = Graph::new();
        let p = f.model.params.bind(&mut g, false);
        let h = g.constant(random_vector(&mut rng, 4));
        let m = g.constant(memory.clone());
        let (out, _) = attention(&mut g, &p, &f.model.cmrd, h, m).unwrap();
        for (a, e) in g.value(out).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_direct_formula_and_gradient() {
    let f = fixture(6, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let memory = random_matrix(&mut rng, 4, 6);
    let h = random_vector(&mut rng, 6);
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, false);
    let hv = g.constant(h.clone());
    let m = g.constant(memory.clone());
    let (out, w) = attention(&mut g, &p, &f.model.cmrd, hv, m).unwrap();
    let (expected, weights) = attention_oracle(&f.model.params, &f.model.cmrd, h.data(), &memory);
    for (a, e) in g.value(out).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
    for (a, e) in g.value(w).data().iter().zip(&weights) {
        assert!((a - e).abs() < 1e-12);
    }

    let c = &f.model.cmrd;
    let ids = [c.attn_w1, c.attn_b1, c.attn_w2, c.attn_b2];
    let check = grad_check_params(
        &f.model.params,
        &ids,
        |g, p| -> Result<Var, ModelError> {
            let hv = g.constant(h.clone());
            let m = g.constant(memory.clone());
            let (out, _) = attention(g, p, c, hv, m)?;
            let t = g.tanh(out);
            Ok(g.sum(t))
        },
        1e-4,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-4, "{}", check.max_rel_error);
}

#[test]
fn attention_rejects_width_mismatch() {
    let f = fixture(4, 3, 1);
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, false);
    let h = g.constant(Tensor::zeros(&[4]));
    let m = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        attention(&mut g, &p, &f.model.cmrd, h, m),
        Err(ModelError::WidthMismatch { .. })
    ));
}

#[test]
fn zero_condition_leaves_lstm_output_unchanged() {
    let f = fixture(6, 4, 4);
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, false);
    let ctx = context(&mut g, &f, &p);
    let state = ctx.initial_state(&mut g);
    let zero = g.constant(Tensor::zeros(&[6]));
    let out = cmrd_step(&mut g, &ctx, Level::Domain, ctx.cls, &state, zero, &mut Pass::Eval).unwrap();
    let [h0, h1, ..] = out.chain;
    assert_eq!(g.value(h0), g.value(h1));
}

#[test]
fn step_probabilities_cover_vocabulary() {
    let f = fixture(6, 4, 5);
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, false);
    let ctx = context(&mut g, &f, &p);
    let state = ctx.initial_state(&mut g);
    let zero = g.constant(Tensor::zeros(&[6]));
    let out = cmrd_step(&mut g, &ctx, Level::Slot, ctx.cls, &state, zero, &mut Pass::Eval).unwrap();
    assert_eq!(out.probs.len(), f.vocab.len(Level::Slot));
    assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for w in &out.attention {
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(out.attention.map(|w| w.len()), [4, 3, 5]);
}

#[test]
fn step_rejects_unknown_token_and_bad_condition() {
    let f = fixture(4, 3, 6);
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, false);
    let ctx = context(&mut g, &f, &p);
    let state = ctx.initial_state(&mut g);
    let zero = g.constant(Tensor::zeros(&[4]));
    let bad = g.constant(Tensor::zeros(&[5]));
    assert!(matches!(
        cmrd_step(&mut g, &ctx, Level::Domain, 10_000, &state, zero, &mut Pass::Eval),
        Err(ModelError::UnknownToken(_))
    ));
    assert!(matches!(
        cmrd_step(&mut g, &ctx, Level::Domain, ctx.cls, &state, bad, &mut Pass::Eval),
        Err(ModelError::WidthMismatch { .. })
    ));
}

/// Full-step loss with the step fed a word token and a random condition.
fn step_loss(
    g: &mut Graph,
    f: &Fixture,
    p: &Bound,
    condition: &Tensor,
    target: usize,
) -> Result<Var, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let ctx = context(g, f, p);
    let state = ctx.initial_state(g);
    let c = g.constant(condition.clone());
    let input = f.table.index_of(&TokenUnit::word("cheap")).unwrap();
    let out = cmrd_step(g, &ctx, Level::Value, input, &state, c, &mut Pass::Train(&mut rng))?;
    let pos = f.vocab.position(Level::Value, target).unwrap();
    Ok(g.cross_entropy(out.logits, pos)?)
}

#[test]
fn full_step_gradient_matches_finite_differences() {
    let f = fixture(4, 3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let condition = random_vector(&mut rng, 4);
    let target = f.table.index_of(&TokenUnit::word("north")).unwrap();
    let check = grad_check_params(
        &f.model.params,
        &f.model.cmrd.ids(),
        |g, p| step_loss(g, &f, p, &condition, target),
        1e-4,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-4, "{} at {:?}", check.max_rel_error, check.worst);
}

/// Re-assembles the step by hand with `h₁, h₂, h₃` entering the
/// concatenation as constants; no dropout (eval) to keep the oracle exact.
fn frozen_branch_loss(g: &mut Graph, f: &Fixture, p: &Bound, condition: &Tensor, target: usize) -> Var {
    let c = &f.model.cmrd;
    let [b, s, u] = f.memories.clone().map(|m| g.constant(m));
    let q0 = g.constant(f.q0.clone());
    let zero = g.constant(Tensor::zeros(&[c.d_m]));
    let input = f.table.index_of(&TokenUnit::word("cheap")).unwrap();
    let mut x = g.constant(Tensor::vector(f.table.vector(input).to_vec()));
    for cell in &c.lstm {
        x = cell.step(g, p, x, q0, zero).unwrap().0;
    }
    let cond = g.constant(condition.clone());
    let h1 = g.add(x, cond).unwrap();
    let (a, _) = attention(g, p, c, h1, b).unwrap();
    let h2 = g.add(h1, a).unwrap();
    let (a, _) = attention(g, p, c, h2, s).unwrap();
    let h3 = g.add(h2, a).unwrap();
    let (a, _) = attention(g, p, c, h3, u).unwrap();
    let h4 = g.add(h3, a).unwrap();
    let frozen: Vec<Var> = [h1, h2, h3].iter().map(|&h| g.constant(g.value(h).clone())).collect();
    let mut r = g.concat(&[frozen[0], frozen[1], frozen[2], h4], 0).unwrap();
    for &(w, bias) in &c.mlp {
        let z = linear(g, p, r, w, bias).unwrap();
        r = g.relu(z);
    }
    let h_o = linear(g, p, r, c.out_w, c.out_b).unwrap();
    let e = g.constant(f.table.select(f.vocab.rows(Level::Value)));
    let logits = g.matmul(e, h_o).unwrap();
    g.cross_entropy(logits, f.vocab.position(Level::Value, target).unwrap()).unwrap()
}

fn eval_step_loss(g: &mut Graph, f: &Fixture, p: &Bound, condition: &Tensor, target: usize) -> Var {
    let ctx = context(g, f, p);
    let state = ctx.initial_state(g);
    let c = g.constant(condition.clone());
    let input = f.table.index_of(&TokenUnit::word("cheap")).unwrap();
    let out = cmrd_step(g, &ctx, Level::Value, input, &state, c, &mut Pass::Eval).unwrap();
    let pos = f.vocab.position(Level::Value, target).unwrap();
    g.cross_entropy(out.logits, pos).unwrap()
}

fn param_grads(
    f: &Fixture,
    build: impl Fn(&mut Graph, &Fixture, &Bound) -> Var,
) -> Vec<Tensor> {
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, true);
    let loss = build(&mut g, f, &p);
    let grads = g.backward(loss).unwrap();
    p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect()
}

#[test]
fn stop_gradient_equals_frozen_branch_oracle() {
    let mut f = fixture(6, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let condition = random_vector(&mut rng, 6);
    let target = f.table.index_of(&TokenUnit::word("area")).unwrap();

    let blocked = param_grads(&f, |g, f, p| eval_step_loss(g, f, p, &condition, target));
    let oracle = param_grads(&f, |g, f, p| frozen_branch_loss(g, f, p, &condition, target));
    for (a, b) in blocked.iter().zip(&oracle) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }

    f.model.config.block_grad = false;
    let unblocked = param_grads(&f, |g, f, p| eval_step_loss(g, f, p, &condition, target));
    let max_diff = unblocked
        .iter()
        .zip(&oracle)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    assert!(max_diff > 1e-6, "blocking had no effect");
}

#[test]
fn parameter_count_independent_of_vocabulary() {
    let cfg = config(8, 6);
    let small = table(6, 50 - table(6, 0).len());
    let large = table(6, 5000 - table(6, 0).len());
    assert_eq!(small.len(), 50);
    assert_eq!(large.len(), 5000);
    let mut counts = Vec::new();
    for t in [&small, &large] {
        let model = Model::new(cfg.clone(), 1).unwrap();
        let vocab = OutputVocabulary::new(t, OutputMode::Full);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let m = g.constant(Tensor::zeros(&[2, 8]));
        let q0 = g.constant(Tensor::zeros(&[8]));
        let mems = Memories {
            belief: m,
            system: m,
            user: m,
        };
        let ctx = DecoderContext::new(&mut g, &model, t, &vocab, &p, mems, q0).unwrap();
        let state = ctx.initial_state(&mut g);
        let zero = g.constant(Tensor::zeros(&[8]));
        let out = cmrd_step(&mut g, &ctx, Level::Value, ctx.cls, &state, zero, &mut Pass::Eval).unwrap();
        assert_eq!(out.probs.len(), vocab.len(Level::Value));
        counts.push(model.cmrd.num_scalars(&model.params));
    }
    assert_eq!(counts[0], counts[1]);
}

#[test]
fn forced_decode_runs_gold_plus_terminator() {
    let f = fixture(6, 4, 11);
    let gold: Vec<usize> = ["cheap", "north", "food"]
        .iter()
        .map(|w| f.table.index_of(&TokenUnit::word(*w)).unwrap())
        .collect();
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, false);
    let ctx = context(&mut g, &f, &p);
    let zero = g.constant(Tensor::zeros(&[6]));
    let r = decode_sequence(&mut g, &ctx, Level::Value, zero, 10, Some(&gold), &mut Pass::Eval).unwrap();
    assert_eq!(r.steps.len(), 4);
    assert_eq!(r.hidden.len(), 3);
    assert_eq!(r.tokens, gold);
    assert_eq!(r.targets.len(), 4);
    assert_eq!(*r.targets.last().unwrap(), f.vocab.position(Level::Value, ctx.sep).unwrap());

    let empty = decode_sequence(&mut g, &ctx, Level::Domain, zero, 10, Some(&[]), &mut Pass::Eval).unwrap();
    assert_eq!(empty.steps.len(), 1);
    assert!(empty.tokens.is_empty());
}

#[test]
fn free_decode_terminates_for_random_models() {
    for seed in 0..100 {
        let f = fixture(4, 3, seed);
        let mut g = Graph::new();
        let p = f.model.params.bind(&mut g, false);
        let ctx = context(&mut g, &f, &p);
        let zero = g.constant(Tensor::zeros(&[4]));
        let r = decode_sequence(&mut g, &ctx, Level::Domain, zero, 5, None, &mut Pass::Eval).unwrap();
        assert!(r.tokens.len() <= 5);
        assert_eq!(r.tokens.len(), r.hidden.len());
        assert!(!r.tokens.contains(&ctx.sep));
    }
}

#[test]
fn decode_rejects_zero_max_len() {
    let f = fixture(4, 3, 1);
    let mut g = Graph::new();
    let p = f.model.params.bind(&mut g, false);
    let ctx = context(&mut g, &f, &p);
    let zero = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(
        decode_sequence(&mut g, &ctx, Level::Domain, zero, 0, None, &mut Pass::Eval),
        Err(ModelError::MaxLen)
    ));
}

#[test]
fn distinct_conditions_give_distinct_first_residual() {
    let f = fixture(6, 4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let c1 = random_vector(&mut rng, 6);
        let mut c2 = c1.clone();
        let k = rng.random_range(0..6);
        c2.data_mut()[k] += rng.random_range(0.01..1.0);
        let mut g = Graph::new();
        let p = f.model.params.bind(&mut g, false);
        let ctx = context(&mut g, &f, &p);
        let state = ctx.initial_state(&mut g);
        let v1 = g.constant(c1);
        let v2 = g.constant(c2);
        let a = cmrd_step(&mut g, &ctx, Level::Slot, ctx.cls, &state, v1, &mut Pass::Eval).unwrap();
        let b = cmrd_step(&mut g, &ctx, Level::Slot, ctx.cls, &state, v2, &mut Pass::Eval).unwrap();
        assert_ne!(g.value(a.chain[1]), g.value(b.chain[1]));
    }
}

#[test]
fn full_mode_folds_single_word_units() {
    let t = table(4, 0);
    let vocab = OutputVocabulary::new(&t, OutputMode::Full);
    let word = t.index_of(&TokenUnit::word("food")).unwrap();
    let slot = t.index_of(&TokenUnit::slot("food")).unwrap();
    assert_eq!(vocab.position(Level::Slot, slot), vocab.position(Level::Slot, word));
    let multi = t.index_of(&TokenUnit::slot("price range")).unwrap();
    assert!(vocab.position(Level::Slot, multi).is_some());
    assert_eq!(vocab.len(Level::Slot), t.len() - 3);

    let by_level = OutputVocabulary::new(&t, OutputMode::ByLevel);
    assert_eq!(by_level.len(Level::Domain), 3);
    assert_eq!(by_level.len(Level::Slot), 4);
    assert!(by_level.position(Level::Domain, slot).is_none());
}

#[test]
fn attention_order_changes_chain() {
    let mut f = fixture(6, 4, 14);
    let run = |f: &Fixture| {
        let mut g = Graph::new();
        let p = f.model.params.bind(&mut g, false);
        let ctx = context(&mut g, f, &p);
        let state = ctx.initial_state(&mut g);
        let zero = g.constant(Tensor::zeros(&[6]));
        let out = cmrd_step(&mut g, &ctx, Level::Domain, ctx.cls, &state, zero, &mut Pass::Eval).unwrap();
        g.value(out.chain[4]).clone()
    };
    let a = run(&f);
    f.model.config.attention_order = AttentionOrder::UtterancesFirst;
    assert_ne!(a, run(&f));
}
