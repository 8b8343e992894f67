//! Hierarchical generation: domains, then the slots of each domain, then the
//! value of each slot, all from one decoder.

use serde::{Deserialize, Serialize};

use crate::belief::{canonical_order, flatten, postprocess, BeliefState, FrequencyTables, Triplet};
use crate::cmrd::{decode_sequence, DecodeResult, DecoderContext, Level, Memories, OutputVocabulary};
use crate::data::Turn;
use crate::embeddings::{tokenize, EmbeddingTable, TokenKind, TokenUnit};
use crate::encoder::{encode, init_decoder_state, Role};
use crate::model::{MaxLengths, Model, ModelError, Pass};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::Bound;

/// What the tracker reads at one turn.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TurnInput {
    pub system: Vec<String>,
    pub user: Vec<String>,
    pub previous: BeliefState,
}

impl TurnInput {
    pub fn from_turn(turn: &Turn, previous: BeliefState) -> Self {
        TurnInput {
            system: turn.system.clone(),
            user: turn.user.clone(),
            previous,
        }
    }
}

/// Source of the previous-state input when tracking a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateFeed {
    Gold,
    #[default]
    Predicted,
}

fn words(tokens: &[String]) -> Vec<TokenUnit> {
    tokens.iter().map(|t| TokenUnit::word(t.as_str())).collect()
}

/// Runs the three encoders and builds `q₀`.
pub fn encode_turn(
    g: &mut Graph,
    model: &Model,
    table: &EmbeddingTable,
    p: &Bound,
    inp: &TurnInput,
) -> Result<(Memories, Var), ModelError> {
    let previous = flatten(&inp.previous)?;
    let belief = encode(g, p, &model.encoder, &previous, table, Role::Belief)?;
    let system = encode(g, p, &model.encoder, &words(&inp.system), table, Role::System)?;
    let user = encode(g, p, &model.encoder, &words(&inp.user), table, Role::User)?;
    let q0 = init_decoder_state(g, &belief, &system, &user)?;
    let memories = Memories {
        belief: belief.h,
        system: system.h,
        user: user.h,
    };
    Ok((memories, q0))
}

/// One `decode_sequence` call of a turn.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub level: Level,
    /// `[]` for domains, `[i]` for the slots of domain `i`, `[i, j]` for the
    /// value of slot `j` of domain `i`.
    pub path: Vec<usize>,
    pub condition: Var,
    pub result: DecodeResult,
}

fn gold_index(table: &EmbeddingTable, unit: TokenUnit) -> Result<usize, ModelError> {
    table.index_of(&unit).ok_or_else(|| ModelError::UnknownToken(unit.key()))
}

/// Runs every decode call of one turn. With `gold`, each level is
/// teacher-forced to the gold sequence and the hierarchy follows the gold
/// structure.
pub fn decode_turn(
    g: &mut Graph,
    ctx: &DecoderContext<'_>,
    max: MaxLengths,
    gold: Option<&BeliefState>,
    pass: &mut Pass<'_>,
) -> Result<Vec<CallRecord>, ModelError> {
    let table = ctx.table;
    let gold_domains: Option<Vec<&str>> = gold.map(|b| b.domains().collect());
    let forced: Option<Vec<usize>> = gold_domains
        .as_ref()
        .map(|ds| ds.iter().map(|d| gold_index(table, TokenUnit::domain(*d))).collect())
        .transpose()?;
    let zero = g.constant(Tensor::zeros(&[ctx.model.config.d_m]));
    let domains = decode_sequence(g, ctx, Level::Domain, zero, max.domains, forced.as_deref(), pass)?;
    let domain_hidden = domains.hidden.clone();
    let mut calls = vec![CallRecord {
        level: Level::Domain,
        path: vec![],
        condition: zero,
        result: domains,
    }];
    for (i, &h_d) in domain_hidden.iter().enumerate() {
        let gold_slots: Option<Vec<(&str, &[String])>> = match (gold, &gold_domains) {
            (Some(b), Some(ds)) => Some(b.slots(ds[i]).collect()),
            _ => None,
        };
        let forced: Option<Vec<usize>> = gold_slots
            .as_ref()
            .map(|ss| ss.iter().map(|(s, _)| gold_index(table, TokenUnit::slot(*s))).collect())
            .transpose()?;
        let slots = decode_sequence(g, ctx, Level::Slot, h_d, max.slots, forced.as_deref(), pass)?;
        let slot_hidden = slots.hidden.clone();
        calls.push(CallRecord {
            level: Level::Slot,
            path: vec![i],
            condition: h_d,
            result: slots,
        });
        for (j, &h_s) in slot_hidden.iter().enumerate() {
            let forced: Option<Vec<usize>> = gold_slots
                .as_ref()
                .map(|ss| ss[j].1.iter().map(|w| gold_index(table, TokenUnit::word(w.as_str()))).collect())
                .transpose()?;
            let values = decode_sequence(g, ctx, Level::Value, h_s, max.values, forced.as_deref(), pass)?;
            calls.push(CallRecord {
                level: Level::Value,
                path: vec![i, j],
                condition: h_s,
                result: values,
            });
        }
    }
    Ok(calls)
}

/// Domain or slot name of a generated unit; control tokens name nothing.
fn unit_name(unit: &TokenUnit) -> String {
    match unit.kind {
        TokenKind::Control => String::new(),
        _ => unit.surface.clone(),
    }
}

fn value_words(units: &[&TokenUnit]) -> Vec<String> {
    units
        .iter()
        .flat_map(|u| match u.kind {
            TokenKind::Word => vec![u.surface.clone()],
            TokenKind::Domain | TokenKind::Slot => tokenize(&u.surface),
            TokenKind::Control => vec![],
        })
        .collect()
}

/// Triplets in generation order, before post-processing.
pub fn assemble_triplets(calls: &[CallRecord], table: &EmbeddingTable) -> Vec<Triplet> {
    let units = |c: &CallRecord| -> Vec<&TokenUnit> { c.result.tokens.iter().map(|&t| table.unit(t)).collect() };
    let domain_names: Vec<String> = calls
        .iter()
        .find(|c| c.level == Level::Domain)
        .map(|c| units(c).into_iter().map(unit_name).collect())
        .unwrap_or_default();
    let mut slot_names: Vec<Vec<String>> = vec![Vec::new(); domain_names.len()];
    for c in calls.iter().filter(|c| c.level == Level::Slot) {
        slot_names[c.path[0]] = units(c).into_iter().map(unit_name).collect();
    }
    calls
        .iter()
        .filter(|c| c.level == Level::Value)
        .map(|c| {
            let (i, j) = (c.path[0], c.path[1]);
            Triplet {
                domain: domain_names[i].clone(),
                slot: slot_names[i][j].clone(),
                value: value_words(&units(c)),
            }
        })
        .collect()
}

/// Generated tokens and conditioning of one decode call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeTrace {
    pub level: Level,
    pub path: Vec<usize>,
    pub tokens: Vec<String>,
    pub condition: Vec<f64>,
}

/// Attention weights of one decoder step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub level: usize,
    pub step: usize,
    pub token: String,
    pub weights_belief: Vec<f64>,
    pub weights_sys: Vec<f64>,
    pub weights_usr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnPrediction {
    /// Post-processed, canonically ordered.
    pub state: BeliefState,
    /// Triplets as generated.
    pub raw: Vec<Triplet>,
    pub calls: Vec<DecodeTrace>,
    pub attention: Vec<AttentionRecord>,
}

impl TurnPrediction {
    pub fn decode_calls(&self) -> usize {
        self.calls.len()
    }
}

/// An eval-mode model paired with its embedding table and ordering tables.
pub struct Tracker<'a> {
    pub model: &'a Model,
    pub table: &'a EmbeddingTable,
    pub freq: &'a FrequencyTables,
    vocab: OutputVocabulary,
}

impl<'a> Tracker<'a> {
    pub fn new(model: &'a Model, table: &'a EmbeddingTable, freq: &'a FrequencyTables) -> Self {
        let vocab = OutputVocabulary::new(table, model.config.output_mode);
        Tracker {
            model,
            table,
            freq,
            vocab,
        }
    }

    pub fn vocab(&self) -> &OutputVocabulary {
        &self.vocab
    }

    pub fn predict_turn(&self, inp: &TurnInput) -> Result<TurnPrediction, ModelError> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, false);
        let (memories, q0) = encode_turn(&mut g, self.model, self.table, &p, inp)?;
        let ctx = DecoderContext::new(&mut g, self.model, self.table, &self.vocab, &p, memories, q0)?;
        let calls = decode_turn(&mut g, &ctx, self.model.config.max_len, None, &mut Pass::Eval)?;

        let raw = assemble_triplets(&calls, self.table);
        let mut state = BeliefState::new();
        for t in postprocess(raw.clone()) {
            // Names that fail validation are dropped like empty components.
            let _ = state.insert(&t.domain, &t.slot, t.value);
        }
        let state = canonical_order(&state, self.freq);

        let mut traces = Vec::with_capacity(calls.len());
        let mut attention = Vec::new();
        for c in &calls {
            let surface = |i: usize| self.table.unit(i).surface.clone();
            traces.push(DecodeTrace {
                level: c.level,
                path: c.path.clone(),
                tokens: c.result.tokens.iter().map(|&t| surface(t)).collect(),
                condition: g.value(c.condition).data().to_vec(),
            });
            for (step, s) in c.result.steps.iter().enumerate() {
                let [b, sys, usr] = s.attention.clone();
                attention.push(AttentionRecord {
                    level: c.level.number(),
                    step,
                    token: surface(s.token),
                    weights_belief: b,
                    weights_sys: sys,
                    weights_usr: usr,
                });
            }
        }
        Ok(TurnPrediction {
            state,
            raw,
            calls: traces,
            attention,
        })
    }

    /// Predicts every turn. With [`StateFeed::Predicted`] each turn reads the
    /// previous prediction; with [`StateFeed::Gold`] it reads the previous
    /// gold state.
    pub fn track_dialogue(&self, turns: &[Turn], feed: StateFeed) -> Result<Vec<TurnPrediction>, ModelError> {
        let mut out: Vec<TurnPrediction> = Vec::with_capacity(turns.len());
        for (t, turn) in turns.iter().enumerate() {
            let previous = match (t, feed) {
                (0, _) => BeliefState::new(),
                (_, StateFeed::Gold) => canonical_order(&turns[t - 1].belief, self.freq),
                (_, StateFeed::Predicted) => out[t - 1].state.clone(),
            };
            out.push(self.predict_turn(&TurnInput::from_turn(turn, previous))?);
        }
        Ok(out)
    }
}
