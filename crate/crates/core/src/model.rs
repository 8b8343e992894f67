//! Model configuration, the full parameter set, and shared building blocks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmrd::CmrdParams;
use crate::belief::BeliefError;
use crate::embeddings::EmbeddingError;
use crate::encoder::EncoderParams;
use crate::numcore::{Graph, Tensor, TensorError, Var};
use crate::params::{Bound, ParamId, ParamRegistry, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("token {0:?} is not in the output vocabulary")]
    UnknownToken(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("memory width {got} does not match model size {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("max_len must be at least 1")]
    MaxLen,
}

/// Order in which the decoder visits its three memories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrder {
    /// Belief, then system, then user.
    #[default]
    BeliefFirst,
    /// System, then user, then belief.
    UtterancesFirst,
}

/// Where the decoder's dropout sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    /// `h_s = dropout(h_k)` feeds both the emitted representation and the
    /// output projection.
    #[default]
    AfterMlp,
    /// Only the output projection sees dropout; `h_s = h_k`.
    BeforeOutput,
}

/// Candidate tokens for the decoder's softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Every distinct entry of the embedding table at every level. A
    /// multi-word unit scores the mean of its words' logits and so never
    /// wins an argmax against them.
    Full,
    /// Domains at level 1, slots at level 2, words at level 3 (plus `[SEP]`).
    #[default]
    ByLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxLengths {
    pub domains: usize,
    pub slots: usize,
    pub values: usize,
}

impl Default for MaxLengths {
    fn default() -> Self {
        MaxLengths {
            domains: 8,
            slots: 12,
            values: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_m: usize,
    pub d_e: usize,
    pub dropout: f64,
    pub attention_order: AttentionOrder,
    pub dropout_placement: DropoutPlacement,
    pub block_grad: bool,
    pub output_mode: OutputMode,
    pub max_len: MaxLengths,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_m: 512,
            d_e: 1024,
            dropout: 0.5,
            attention_order: AttentionOrder::default(),
            dropout_placement: DropoutPlacement::default(),
            block_grad: true,
            output_mode: OutputMode::default(),
            max_len: MaxLengths::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_m == 0 || !self.d_m.is_multiple_of(2) {
            return Err(ModelError::Config(format!("d_m must be positive and even, got {}", self.d_m)));
        }
        if self.d_e == 0 {
            return Err(ModelError::Config("d_e must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let m = self.max_len;
        if m.domains == 0 || m.slots == 0 || m.values == 0 {
            return Err(ModelError::MaxLen);
        }
        Ok(())
    }
}

/// Whether a forward pass trains (dropout active, gradients wanted).
pub enum Pass<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }

    pub(crate) fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var, TensorError> {
        match self {
            Pass::Train(rng) => g.dropout(x, p, true, &mut **rng),
            Pass::Eval => Ok(x),
        }
    }
}

/// One LSTM cell: per-gate input weights, recurrent weights and biases, in
/// the gate order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmCell {
    pub w_x: [ParamId; 4],
    pub w_h: [ParamId; 4],
    pub b: [ParamId; 4],
    pub hidden: usize,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

impl LstmCell {
    pub fn register(reg: &mut ParamRegistry, prefix: &str, input: usize, hidden: usize) -> Self {
        let w_x = GATES.map(|gate| reg.weight(format!("{prefix}.w_x.{gate}"), input, hidden));
        let w_h = GATES.map(|gate| reg.weight(format!("{prefix}.w_h.{gate}"), hidden, hidden));
        let b = GATES.map(|gate| reg.bias(format!("{prefix}.b.{gate}"), hidden));
        LstmCell { w_x, w_h, b, hidden }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.w_x.iter().chain(&self.w_h).chain(&self.b).copied()
    }

    /// `(h, c) → (h', c')` for input `x`.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), TensorError> {
        let mut pre = [x; 4];
        for k in 0..4 {
            let xw = g.matmul(x, p.var(self.w_x[k]))?;
            let hw = g.matmul(h, p.var(self.w_h[k]))?;
            let s = g.add(xw, hw)?;
            pre[k] = g.add(s, p.var(self.b[k]))?;
        }
        let i = g.sigmoid(pre[0]);
        let f = g.sigmoid(pre[1]);
        let cand = g.tanh(pre[2]);
        let o = g.sigmoid(pre[3]);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// `x · W + b`.
pub(crate) fn linear(g: &mut Graph, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var, TensorError> {
    let xw = g.matmul(x, p.var(w))?;
    g.add(xw, p.var(b))
}

/// Encoder and decoder parameters in one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub cmrd: CmrdParams,
}

impl Model {
    /// Declares the layout for `config`.
    pub fn layout(config: &ModelConfig) -> Result<(ParamRegistry, EncoderParams, CmrdParams), ModelError> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let encoder = EncoderParams::register(&mut reg, config.d_e, config.d_m);
        let cmrd = CmrdParams::register(&mut reg, config.d_e, config.d_m);
        Ok((reg, encoder, cmrd))
    }

    /// Kaiming-initialized weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let (reg, encoder, cmrd) = Self::layout(&config)?;
        let params = crate::training::init_params(reg.specs(), seed);
        Ok(Model {
            config,
            params,
            encoder,
            cmrd,
        })
    }

    /// Rebuilds a model around existing values, checking shapes.
    pub fn from_values(config: ModelConfig, values: Vec<Tensor>) -> Result<Self, ModelError> {
        let (reg, encoder, cmrd) = Self::layout(&config)?;
        let specs = reg.into_specs();
        if specs.len() != values.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                values.len()
            )));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.shape != v.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    v.shape(),
                    s.shape
                )));
            }
        }
        Ok(Model {
            config,
            params: ParamStore::from_parts(specs, values),
            encoder,
            cmrd,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }
}
