//! Two-layer bidirectional LSTM encoder, shared by the belief, system and
//! user roles.

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, TokenUnit};
use crate::model::{LstmCell, ModelError};
use crate::numcore::{Graph, Tensor, TensorError, Var};
use crate::params::{Bound, ParamId, ParamRegistry};

pub const ENCODER_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Belief,
    System,
    User,
}

/// `layers[l] = (forward, backward)`, each with hidden size `d_m / 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub d_m: usize,
}

impl EncoderParams {
    pub fn register(reg: &mut ParamRegistry, d_e: usize, d_m: usize) -> Self {
        let hidden = d_m / 2;
        let layers = (0..ENCODER_LAYERS)
            .map(|l| {
                let input = if l == 0 { d_e } else { d_m };
                (
                    LstmCell::register(reg, &format!("encoder.l{l}.fwd"), input, hidden),
                    LstmCell::register(reg, &format!("encoder.l{l}.bwd"), input, hidden),
                )
            })
            .collect();
        EncoderParams { layers, d_m }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|(f, b)| f.ids().chain(b.ids()).collect::<Vec<_>>())
            .collect()
    }
}

/// `H ∈ R^{T×d_m}` for one input sequence.
#[derive(Debug, Clone)]
pub struct EncodedMemory {
    pub role: Role,
    /// `[T × d_m]` stack of `rows`.
    pub h: Var,
    pub rows: Vec<Var>,
    /// Last-layer forward state after the final position.
    pub final_forward: Var,
    /// Last-layer backward state after the first position.
    pub final_backward: Var,
}

impl EncodedMemory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn run_direction(
    g: &mut Graph,
    p: &Bound,
    cell: &LstmCell,
    inputs: &[Var],
    reverse: bool,
) -> Result<(Vec<Var>, Var), TensorError> {
    let zero = g.constant(Tensor::zeros(&[cell.hidden]));
    let (mut h, mut c) = (zero, zero);
    let mut out = vec![zero; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        (h, c) = cell.step(g, p, inputs[t], h, c)?;
        out[t] = h;
    }
    Ok((out, h))
}

/// Runs the stacked BiLSTM over already-embedded inputs with zero initial
/// states; rows of the result are forward ⊕ backward of the last layer.
pub fn encode_vectors(
    g: &mut Graph,
    p: &Bound,
    params: &EncoderParams,
    inputs: &[Var],
    role: Role,
) -> Result<EncodedMemory, ModelError> {
    if inputs.is_empty() {
        return Err(TensorError::Empty { op: "encode" }.into());
    }
    let mut layer_in = inputs.to_vec();
    let mut finals = None;
    for (fwd, bwd) in &params.layers {
        let (f_rows, f_last) = run_direction(g, p, fwd, &layer_in, false)?;
        let (b_rows, b_last) = run_direction(g, p, bwd, &layer_in, true)?;
        layer_in = f_rows
            .iter()
            .zip(&b_rows)
            .map(|(&f, &b)| g.concat(&[f, b], 0))
            .collect::<Result<_, _>>()?;
        finals = Some((f_last, b_last));
    }
    let (final_forward, final_backward) = finals.expect("at least one layer");
    let h = g.stack_rows(&layer_in)?;
    Ok(EncodedMemory {
        role,
        h,
        rows: layer_in,
        final_forward,
        final_backward,
    })
}

/// Wraps `tokens` in `[CLS] … [SEP]`, embeds them with the fixed table and
/// encodes the result.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    params: &EncoderParams,
    tokens: &[TokenUnit],
    table: &EmbeddingTable,
    role: Role,
) -> Result<EncodedMemory, ModelError> {
    let mut inputs = Vec::with_capacity(tokens.len() + 2);
    let wrapped = std::iter::once(TokenUnit::cls())
        .chain(tokens.iter().cloned())
        .chain(std::iter::once(TokenUnit::sep()));
    for unit in wrapped {
        let v = table.resolve(&unit)?;
        inputs.push(g.constant(Tensor::vector(v)));
    }
    encode_vectors(g, p, params, &inputs, role)
}

/// `q₀`: the mean of the three per-encoder mean hidden states.
pub fn init_decoder_state(
    g: &mut Graph,
    belief: &EncodedMemory,
    system: &EncodedMemory,
    user: &EncodedMemory,
) -> Result<Var, ModelError> {
    let width = g.shape(belief.h)[1];
    for m in [system, user] {
        let w = g.shape(m.h)[1];
        if w != width {
            return Err(ModelError::WidthMismatch {
                expected: width,
                got: w,
            });
        }
    }
    let means = [belief.h, system.h, user.h]
        .into_iter()
        .map(|h| g.mean_rows(h))
        .collect::<Result<Vec<_>, _>>()?;
    let total = g.add_all(&means)?;
    Ok(g.scale(total, 1.0 / 3.0))
}
