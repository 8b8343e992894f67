//! Conditional memory relation decoder.
//!
//! One parameter set serves every hierarchy level. Each step runs a 2-layer
//! LSTM over the fed-back token, injects the condition vector, walks a
//! residual attention chain over the belief, system and user memories, and
//! reasons over the concatenated chain states with a 4-layer MLP before
//! projecting into embedding space and scoring every candidate token.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, TokenKind, TokenUnit, SEP};
use crate::model::{linear, AttentionOrder, DropoutPlacement, LstmCell, Model, ModelError, OutputMode, Pass};
use crate::numcore::{argmax, softmax_slice, Graph, Tensor, TensorError, Var};
use crate::params::{Bound, ParamId, ParamRegistry, ParamStore};

pub const DECODER_LAYERS: usize = 2;
pub const MLP_LAYERS: usize = 4;

/// Hierarchy level a decode call generates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Domain,
    Slot,
    Value,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Domain, Level::Slot, Level::Value];

    pub fn index(self) -> usize {
        match self {
            Level::Domain => 0,
            Level::Slot => 1,
            Level::Value => 2,
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmrdParams {
    pub lstm: Vec<LstmCell>,
    pub attn_w1: ParamId,
    pub attn_b1: ParamId,
    pub attn_w2: ParamId,
    pub attn_b2: ParamId,
    /// `(weight, bias)`; the first weight is `[4 d_m × d_m]`.
    pub mlp: Vec<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub d_m: usize,
}

impl CmrdParams {
    pub fn register(reg: &mut ParamRegistry, d_e: usize, d_m: usize) -> Self {
        let lstm = (0..DECODER_LAYERS)
            .map(|l| {
                let input = if l == 0 { d_e } else { d_m };
                LstmCell::register(reg, &format!("cmrd.lstm.l{l}"), input, d_m)
            })
            .collect();
        let attn_w1 = reg.weight("cmrd.attn.w1", d_m, d_m);
        let attn_b1 = reg.bias("cmrd.attn.b1", d_m);
        let attn_w2 = reg.weight("cmrd.attn.w2", d_m, d_m);
        let attn_b2 = reg.bias("cmrd.attn.b2", d_m);
        let mlp = (0..MLP_LAYERS)
            .map(|i| {
                let input = if i == 0 { 4 * d_m } else { d_m };
                (
                    reg.weight(format!("cmrd.mlp.w{}", i + 1), input, d_m),
                    reg.bias(format!("cmrd.mlp.b{}", i + 1), d_m),
                )
            })
            .collect();
        let out_w = reg.weight("cmrd.out.w", d_m, d_e);
        let out_b = reg.bias("cmrd.out.b", d_e);
        CmrdParams {
            lstm,
            attn_w1,
            attn_b1,
            attn_w2,
            attn_b2,
            mlp,
            out_w,
            out_b,
            d_m,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.lstm.iter().flat_map(|c| c.ids().collect::<Vec<_>>()).collect();
        ids.extend([self.attn_w1, self.attn_b1, self.attn_w2, self.attn_b2]);
        for (w, b) in &self.mlp {
            ids.extend([*w, *b]);
        }
        ids.extend([self.out_w, self.out_b]);
        ids
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        self.ids().iter().map(|&id| store.get(id).len()).sum()
    }
}

/// Candidate rows of the embedding table scored at each level.
///
/// In [`OutputMode::Full`] a domain/slot unit whose vector is bit-identical
/// to the same-surface word (single-word units are the mean of one word) is
/// folded into that word so the softmax never holds two copies of a class.
#[derive(Debug, Clone)]
pub struct OutputVocabulary {
    mode: OutputMode,
    rows: [Vec<usize>; 3],
    positions: [HashMap<usize, usize>; 3],
    alias: HashMap<usize, usize>,
}

impl OutputVocabulary {
    pub fn new(table: &EmbeddingTable, mode: OutputMode) -> Self {
        let mut alias = HashMap::new();
        let rows: [Vec<usize>; 3] = match mode {
            OutputMode::Full => {
                let mut all = Vec::with_capacity(table.len());
                for i in 0..table.len() {
                    let unit = table.unit(i);
                    if unit.kind.is_unit() {
                        let word = TokenUnit::word(unit.surface.as_str());
                        if let Some(w) = table.index_of(&word) {
                            if table.vector(w) == table.vector(i) {
                                alias.insert(i, w);
                                continue;
                            }
                        }
                    }
                    all.push(i);
                }
                [all.clone(), all.clone(), all]
            }
            OutputMode::ByLevel => {
                let sep = table.index_of(&TokenUnit::sep());
                let pick = |kind: TokenKind| -> Vec<usize> {
                    (0..table.len())
                        .filter(|&i| table.unit(i).kind == kind || Some(i) == sep)
                        .collect()
                };
                [pick(TokenKind::Domain), pick(TokenKind::Slot), pick(TokenKind::Word)]
            }
        };
        let positions = rows.clone().map(|r| r.into_iter().enumerate().map(|(p, i)| (i, p)).collect());
        OutputVocabulary {
            mode,
            rows,
            positions,
            alias,
        }
    }

    pub fn mode(&self) -> OutputMode {
        self.mode
    }

    pub fn rows(&self, level: Level) -> &[usize] {
        &self.rows[level.index()]
    }

    pub fn len(&self, level: Level) -> usize {
        self.rows[level.index()].len()
    }

    /// Softmax position of table entry `index` at `level`.
    pub fn position(&self, level: Level, index: usize) -> Option<usize> {
        let canonical = self.alias.get(&index).copied().unwrap_or(index);
        self.positions[level.index()].get(&canonical).copied()
    }
}

/// The three encoder memories, each `[T × d_m]`.
#[derive(Debug, Clone, Copy)]
pub struct Memories {
    pub belief: Var,
    pub system: Var,
    pub user: Var,
}

/// Everything a decode step reads but never changes.
pub struct DecoderContext<'a> {
    pub model: &'a Model,
    pub table: &'a EmbeddingTable,
    pub vocab: &'a OutputVocabulary,
    pub params: &'a Bound,
    pub memories: Memories,
    pub q0: Var,
    outputs: [Var; 3],
    pub cls: usize,
    pub sep: usize,
}

impl<'a> DecoderContext<'a> {
    pub fn new(
        g: &mut Graph,
        model: &'a Model,
        table: &'a EmbeddingTable,
        vocab: &'a OutputVocabulary,
        params: &'a Bound,
        memories: Memories,
        q0: Var,
    ) -> Result<Self, ModelError> {
        let d_m = model.config.d_m;
        for m in [memories.belief, memories.system, memories.user, q0] {
            let w = *g.shape(m).last().unwrap_or(&0);
            if w != d_m {
                return Err(ModelError::WidthMismatch { expected: d_m, got: w });
            }
        }
        if table.dim() != model.config.d_e {
            return Err(ModelError::Config(format!(
                "embedding dim {} does not match model d_e {}",
                table.dim(),
                model.config.d_e
            )));
        }
        let lookup = |u: TokenUnit| table.index_of(&u).ok_or(ModelError::UnknownToken(u.key()));
        let cls = lookup(TokenUnit::cls())?;
        let sep = lookup(TokenUnit::sep())?;
        let outputs = match vocab.mode() {
            OutputMode::Full => {
                let m = g.constant(table.select(vocab.rows(Level::Domain)));
                [m, m, m]
            }
            OutputMode::ByLevel => Level::ALL.map(|l| g.constant(table.select(vocab.rows(l)))),
        };
        Ok(DecoderContext {
            model,
            table,
            vocab,
            params,
            memories,
            q0,
            outputs,
            cls,
            sep,
        })
    }

    pub fn output_matrix(&self, level: Level) -> Var {
        self.outputs[level.index()]
    }

    /// Initial LSTM state: every layer's hidden state is `q₀`, cells are zero.
    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        let zero = g.constant(Tensor::zeros(&[self.model.config.d_m]));
        DecoderState {
            h: vec![self.q0; DECODER_LAYERS],
            c: vec![zero; DECODER_LAYERS],
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

/// `W₂ᵀ(H softmax(Hᵀ(W₁ᵀh + b₁))) + b₂` with `memory` stored row-wise
/// (`[l × d_m]`). Returns the output and the attention weights.
pub fn attention(
    g: &mut Graph,
    p: &Bound,
    cmrd: &CmrdParams,
    h: Var,
    memory: Var,
) -> Result<(Var, Var), ModelError> {
    let shape = g.shape(memory).to_vec();
    if shape.len() != 2 || shape[1] != cmrd.d_m {
        return Err(ModelError::WidthMismatch {
            expected: cmrd.d_m,
            got: shape.last().copied().unwrap_or(0),
        });
    }
    if shape[0] == 0 {
        return Err(TensorError::Empty { op: "attention" }.into());
    }
    let a = linear(g, p, h, cmrd.attn_w1, cmrd.attn_b1)?;
    let scores = g.matmul(memory, a)?;
    let weights = g.softmax(scores)?;
    let read = g.matmul(weights, memory)?;
    let out = linear(g, p, read, cmrd.attn_w2, cmrd.attn_b2)?;
    Ok((out, weights))
}

/// Result of one decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Table index of the argmax token (lowest index on ties).
    pub token: usize,
    /// `h_s`, the emitted representation.
    pub hidden: Var,
    pub logits: Var,
    /// `p_s` over the level's candidate rows.
    pub probs: Vec<f64>,
    pub state: DecoderState,
    /// Attention weights over the belief, system and user memories.
    pub attention: [Vec<f64>; 3],
    /// `h₀ … h₄`.
    pub chain: [Var; 5],
}

/// One decoder step for fed token `input` (a table index).
pub fn cmrd_step(
    g: &mut Graph,
    ctx: &DecoderContext<'_>,
    level: Level,
    input: usize,
    state: &DecoderState,
    condition: Var,
    pass: &mut Pass<'_>,
) -> Result<StepOutput, ModelError> {
    let cfg = &ctx.model.config;
    let params = &ctx.model.cmrd;
    let p = ctx.params;
    if input >= ctx.table.len() {
        return Err(ModelError::UnknownToken(format!("#{input}")));
    }
    let cw = *g.shape(condition).last().unwrap_or(&0);
    if cw != cfg.d_m || g.shape(condition).len() != 1 {
        return Err(ModelError::WidthMismatch { expected: cfg.d_m, got: cw });
    }

    let embedded = g.constant(Tensor::vector(ctx.table.vector(input).to_vec()));
    let mut x = embedded;
    let mut next = state.clone();
    for (l, cell) in params.lstm.iter().enumerate() {
        let (h, c) = cell.step(g, p, x, state.h[l], state.c[l])?;
        next.h[l] = h;
        next.c[l] = c;
        x = h;
    }
    let h0 = x;
    let h1 = g.add(h0, condition)?;

    let order = match cfg.attention_order {
        AttentionOrder::BeliefFirst => [0, 1, 2],
        AttentionOrder::UtterancesFirst => [1, 2, 0],
    };
    let memories = [ctx.memories.belief, ctx.memories.system, ctx.memories.user];
    let mut attention: [Vec<f64>; 3] = Default::default();
    let mut chain = [h0, h1, h1, h1, h1];
    let mut cur = h1;
    for (k, &m) in order.iter().enumerate() {
        let (read, weights) = self::attention(g, p, params, cur, memories[m])?;
        attention[m] = g.value(weights).data().to_vec();
        cur = g.add(cur, read)?;
        chain[k + 2] = cur;
    }
    let [_, h1, h2, h3, h4] = chain;

    let taps = if cfg.block_grad {
        [g.stop_gradient(h1), g.stop_gradient(h2), g.stop_gradient(h3), h4]
    } else {
        [h1, h2, h3, h4]
    };
    let mut r = g.concat(&taps, 0)?;
    for &(w, b) in &params.mlp {
        let z = linear(g, p, r, w, b)?;
        r = g.relu(z);
    }
    let h_k = r;

    let (hidden, projected_in) = match cfg.dropout_placement {
        DropoutPlacement::AfterMlp => {
            let h_s = pass.dropout(g, h_k, cfg.dropout)?;
            (h_s, h_s)
        }
        DropoutPlacement::BeforeOutput => (h_k, pass.dropout(g, h_k, cfg.dropout)?),
    };
    let h_o = linear(g, p, projected_in, params.out_w, params.out_b)?;
    let logits = g.matmul(ctx.output_matrix(level), h_o)?;
    let probs = softmax_slice(g.value(logits).data());
    let position = argmax(&probs).ok_or(TensorError::Empty { op: "argmax" })?;
    let token = ctx.vocab.rows(level)[position];
    Ok(StepOutput {
        token,
        hidden,
        logits,
        probs,
        state: next,
        attention,
        chain,
    })
}

/// Tokens and per-step outputs of one generated sequence.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub level: Level,
    /// Generated (or forced) table indices, terminator excluded.
    pub tokens: Vec<usize>,
    /// `H_s` rows aligned with `tokens`.
    pub hidden: Vec<Var>,
    /// Every executed step, including the terminator step.
    pub steps: Vec<StepOutput>,
    /// Softmax positions of the forced targets, one per step.
    pub targets: Vec<usize>,
}

/// Generates from `[CLS]` until `[SEP]` or `max_len` tokens. With `forced`
/// gold tokens, those are fed back instead and a terminator step follows.
pub fn decode_sequence(
    g: &mut Graph,
    ctx: &DecoderContext<'_>,
    level: Level,
    condition: Var,
    max_len: usize,
    forced: Option<&[usize]>,
    pass: &mut Pass<'_>,
) -> Result<DecodeResult, ModelError> {
    if max_len < 1 {
        return Err(ModelError::MaxLen);
    }
    let mut state = ctx.initial_state(g);
    let mut input = ctx.cls;
    let mut out = DecodeResult {
        level,
        tokens: Vec::new(),
        hidden: Vec::new(),
        steps: Vec::new(),
        targets: Vec::new(),
    };
    match forced {
        Some(gold) => {
            for (t, &target) in gold.iter().chain(std::iter::once(&ctx.sep)).enumerate() {
                let pos = ctx
                    .vocab
                    .position(level, target)
                    .ok_or_else(|| ModelError::UnknownToken(ctx.table.unit(target).key()))?;
                let step = cmrd_step(g, ctx, level, input, &state, condition, pass)?;
                state = step.state.clone();
                if t < gold.len() {
                    out.tokens.push(target);
                    out.hidden.push(step.hidden);
                }
                out.targets.push(pos);
                out.steps.push(step);
                input = target;
            }
        }
        None => {
            while out.tokens.len() < max_len {
                let step = cmrd_step(g, ctx, level, input, &state, condition, pass)?;
                state = step.state.clone();
                let token = step.token;
                let hidden = step.hidden;
                out.steps.push(step);
                if token == ctx.sep {
                    break;
                }
                out.tokens.push(token);
                out.hidden.push(hidden);
                input = token;
            }
        }
    }
    Ok(out)
}

/// Surface string of a decoded token, with `[SEP]` mapped to nothing.
pub fn surface(table: &EmbeddingTable, index: usize) -> Option<&str> {
    let unit = table.unit(index);
    (unit.surface != SEP || unit.kind != TokenKind::Control).then_some(unit.surface.as_str())
}

#[cfg(test)]
mod tests;
