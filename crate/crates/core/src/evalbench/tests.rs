use super::*;
use crate::belief::compute_frequencies;
use crate::data::{gen_synthetic, SynthSpec};
use crate::model::ModelConfig;

fn state(entries: &[(&str, &str, &str)]) -> BeliefState {
    let mut b = BeliefState::new();
    for (d, s, v) in entries {
        b.set(d, s, v).unwrap();
    }
    b
}

#[test]
fn identity_scores_one() {
    let golds = vec![state(&[("train", "day", "monday")]), state(&[])];
    let r = metrics(&golds, &golds).unwrap();
    assert_eq!((r.jd, r.jds, r.jg, r.turns), (1.0, 1.0, 1.0, 2));
}

#[test]
fn wrong_values_only_hit_goal_accuracy() {
    let golds = vec![state(&[("train", "day", "monday")]), state(&[("hotel", "area", "north")])];
    let preds = vec![state(&[("train", "day", "friday")]), state(&[("hotel", "area", "south")])];
    let r = metrics(&preds, &golds).unwrap();
    assert_eq!((r.jd, r.jds, r.jg), (1.0, 1.0, 0.0));
}

#[test]
fn ten_turn_mixed_fixture() {
    let pairs = [
        (state(&[("train", "day", "monday")]), state(&[("train", "day", "monday")])),
        (state(&[("train", "day", "friday")]), state(&[("train", "day", "monday")])),
        (state(&[("train", "day", "monday")]), state(&[("train", "day", "monday"), ("train", "leave at", "10:00")])),
        (state(&[("train", "day", "monday"), ("taxi", "leave at", "10:00")]), state(&[("train", "day", "monday")])),
        (state(&[]), state(&[])),
        (state(&[]), state(&[("hotel", "area", "north")])),
        (
            state(&[("hotel", "stars", "4"), ("train", "day", "monday")]),
            state(&[("train", "day", "monday"), ("hotel", "stars", "4")]),
        ),
        (state(&[("hotel", "area", "north")]), state(&[("attraction", "area", "north")])),
        (state(&[("hotel", "area", "north"), ("hotel", "parking", "yes")]), state(&[("hotel", "area", "north")])),
        (state(&[("restaurant", "food", "modern european")]), state(&[("restaurant", "food", "modern eclectic")])),
    ];
    let (preds, golds): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let r = metrics(&preds, &golds).unwrap();
    assert_eq!((r.jd, r.jds, r.jg), (0.7, 0.5, 0.3));
}

#[test]
fn metric_errors() {
    let one = vec![BeliefState::new()];
    assert!(matches!(metrics(&one, &[]), Err(EvalError::LengthMismatch { .. })));
    assert!(matches!(metrics(&[], &[]), Err(EvalError::Empty)));
}

#[test]
fn itm_reference_values() {
    let k1 = itm(&WOZ2_STATS, &MULTIWOZ_STATS, ItcClass::Constant).unwrap();
    let kn = itm(&WOZ2_STATS, &MULTIWOZ_STATS, ItcClass::Linear).unwrap();
    let kmn = itm(&WOZ2_STATS, &MULTIWOZ_STATS, ItcClass::Product).unwrap();
    assert!((k1 - 2.15).abs() <= 0.01, "{k1}");
    assert!((kn - 25.1).abs() <= 0.2, "{kn}");
    assert!((kmn - 1143.0).abs() <= 5.0, "{kmn}");
    let expected = (13.68 / 7.45) * (13.18 / 11.24);
    assert!((k1 - expected).abs() < 1e-12);
}

#[test]
fn itm_identity_and_multiplicativity() {
    let mid = ItmInputs { t: 10.0, s: 12.0, n: 7.0, m: 300.0 };
    for c in [ItcClass::Constant, ItcClass::Linear, ItcClass::Product] {
        assert_eq!(itm(&WOZ2_STATS, &WOZ2_STATS, c).unwrap(), 1.0);
        let direct = itm(&WOZ2_STATS, &MULTIWOZ_STATS, c).unwrap();
        let chained = itm(&WOZ2_STATS, &mid, c).unwrap() * itm(&mid, &MULTIWOZ_STATS, c).unwrap();
        assert!((direct - chained).abs() <= 1e-12 * direct);
    }
    let zero = ItmInputs { n: 0.0, ..WOZ2_STATS };
    assert!(matches!(itm(&zero, &MULTIWOZ_STATS, ItcClass::Linear), Err(EvalError::ZeroDenominator("n"))));
    assert!(itm(&zero, &MULTIWOZ_STATS, ItcClass::Constant).is_ok());
}

#[test]
fn itc_serde_names() {
    assert_eq!(serde_json::to_string(&ItcClass::Product).unwrap(), "\"omn\"");
    assert_eq!(serde_json::from_str::<ItcClass>("\"o1\"").unwrap(), ItcClass::Constant);
}

#[test]
fn inflation_adds_dummy_slots() {
    let mut v = Vocabulary::default();
    v.slots.extend(["food", "area", "price range"].map(String::from));
    let big = inflate(&v, 35).unwrap();
    assert_eq!(big.slots.len(), 35);
    assert!(big.slots.contains(&dummy_slot(31)));
    assert_eq!(inflate(&v, 3).unwrap(), v);
    assert!(matches!(inflate(&v, 2), Err(EvalError::Inflation { requested: 2, base: 3 })));
}

#[test]
fn single_level_benchmark() {
    let corpus = gen_synthetic(SynthSpec { domains: 1, slots: 3, values: 3 }, 2, 1);
    let vocab = corpus.vocabulary();
    let source = EmbeddingSource::Pseudo { dim: 6, seed: 2 };
    let model = Model::new(ModelConfig { d_m: 8, d_e: 6, ..ModelConfig::default() }, 1).unwrap();
    let freq = compute_frequencies(corpus.labels());
    let cfg = BenchConfig { inflation: vec![3], repeats: 2 };
    let report = benchmark_inference(&model, &vocab, &source, &freq, &corpus, &cfg).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].ratio, 1.0);
    assert_eq!(report.rows[0].turns, corpus.num_turns());
    assert_eq!(report.rows[0].per_turn_ms.len(), corpus.num_turns());
    assert!(report.to_text().lines().count() == 2);
    assert_eq!(report.to_csv().lines().count(), 1 + corpus.num_turns());

    let empty = Corpus::default();
    assert!(matches!(
        benchmark_inference(&model, &vocab, &source, &freq, &empty, &cfg),
        Err(EvalError::Empty)
    ));
}
