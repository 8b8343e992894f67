//! Loss assembly, optimizers, initialization and the training loop.

mod checkpoint;
mod init;
mod optim;

pub use checkpoint::{
    checkpoint_bytes, file_sha256, load_checkpoint, open_checkpoint, parse_checkpoint, quantized, save_checkpoint,
    Checkpoint, CheckpointError, EmbeddingSpec, OpenedCheckpoint, ParamShape, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use init::init_params;
pub use optim::{clip_gradients, OptimizerKind, OptimizerState, BETA1, BETA2, EPSILON};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{canonical_order, BeliefState, FrequencyTables};
use crate::cmrd::{DecoderContext, Level, OutputVocabulary};
use crate::data::Corpus;
use crate::embeddings::EmbeddingTable;
use crate::evalbench::{evaluate, EvalError, MetricsReport};
use crate::hiergen::{decode_turn, encode_turn, StateFeed, Tracker, TurnInput};
use crate::model::{Model, ModelError, Pass};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::Bound;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training set has no turns")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0005,
            clip: 2.0,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            epochs: 150,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(TrainError::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One training turn: the encoder inputs and the canonically ordered gold.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: TurnInput,
    pub gold: BeliefState,
}

/// Every turn of `corpus`, fed the gold previous state.
pub fn examples(corpus: &Corpus, freq: &FrequencyTables) -> Vec<Example> {
    let mut out = Vec::with_capacity(corpus.num_turns());
    for d in &corpus.dialogues {
        let mut previous = BeliefState::new();
        for turn in &d.turns {
            let gold = canonical_order(&turn.belief, freq);
            out.push(Example {
                input: TurnInput::from_turn(turn, previous),
                gold: gold.clone(),
            });
            previous = gold;
        }
    }
    out
}

/// One scored decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub level: Level,
    /// Softmax position of the gold token.
    pub target: usize,
    pub probs: Vec<f64>,
    pub ce: f64,
}

/// Sum of cross-entropies over every teacher-forced step of all three
/// levels, terminators included.
pub fn loss_turn(
    g: &mut Graph,
    model: &Model,
    table: &EmbeddingTable,
    vocab: &OutputVocabulary,
    p: &Bound,
    example: &Example,
    pass: &mut Pass<'_>,
) -> Result<(Var, Vec<StepRecord>), ModelError> {
    let (memories, q0) = encode_turn(g, model, table, p, &example.input)?;
    let ctx = DecoderContext::new(g, model, table, vocab, p, memories, q0)?;
    let calls = decode_turn(g, &ctx, model.config.max_len, Some(&example.gold), pass)?;
    let mut terms = Vec::new();
    let mut records = Vec::new();
    for c in &calls {
        for (step, &target) in c.result.steps.iter().zip(&c.result.targets) {
            let ce = g.cross_entropy(step.logits, target)?;
            records.push(StepRecord {
                level: c.level,
                target,
                probs: step.probs.clone(),
                ce: g.value(ce).data()[0],
            });
            terms.push(ce);
        }
    }
    Ok((g.add_all(&terms)?, records))
}

/// Loss and parameter gradients of one example. `rng` enables dropout.
pub fn turn_gradients(
    model: &Model,
    table: &EmbeddingTable,
    vocab: &OutputVocabulary,
    example: &Example,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let mut pass = match rng {
        Some(r) => Pass::Train(r),
        None => Pass::Eval,
    };
    let (loss, _) = loss_turn(&mut g, model, table, vocab, &p, example, &mut pass)?;
    let grads = g.backward(loss)?;
    let out = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    Ok((g.value(loss).data()[0], out))
}

/// Mean loss and mean gradients over `batch`.
pub fn batch_gradients(
    model: &Model,
    table: &EmbeddingTable,
    vocab: &OutputVocabulary,
    batch: &[&Example],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for ex in batch {
        let (loss, grads) = turn_gradients(model, table, vocab, ex, rng.as_deref_mut())?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    let n = batch.len().max(1) as f64;
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= n;
        }
    }
    Ok((total / n, acc))
}

/// Mean eval-mode loss per turn over `corpus`.
pub fn dataset_loss(
    model: &Model,
    table: &EmbeddingTable,
    freq: &FrequencyTables,
    corpus: &Corpus,
) -> Result<f64, TrainError> {
    let data = examples(corpus, freq);
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let vocab = OutputVocabulary::new(table, model.config.output_mode);
    let mut total = 0.0;
    for ex in &data {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let (loss, _) = loss_turn(&mut g, model, table, &vocab, &p, ex, &mut Pass::Eval)?;
        total += g.value(loss).data()[0];
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Completed epochs, starting at 1.
    pub epoch: usize,
    /// Mean training loss per turn.
    pub loss: f64,
    /// Validation metrics of the epoch's snapshot, predicted-state feed.
    pub valid: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation joint goal accuracy (the last one
    /// without validation data).
    pub best: Model,
    /// Completed epochs at the best snapshot; 0 is the initialization.
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub last: Model,
    pub history: Vec<EpochMetrics>,
}

/// Shuffled mini-batches over turns, clipping, optimizer steps, and a
/// validation pass after each epoch. `on_epoch` sees each epoch's metrics
/// and 32-bit snapshot and returns whether to continue.
pub fn train(
    model: Model,
    cfg: &TrainConfig,
    train_set: &Corpus,
    valid_set: &Corpus,
    table: &EmbeddingTable,
    freq: &FrequencyTables,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model) -> bool,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let data = examples(train_set, freq);
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let vocab = OutputVocabulary::new(table, model.config.output_mode);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut state = OptimizerState::new(cfg.optimizer, &model.params);
    let mut model = model;
    let mut best = quantized(&model);
    let mut best_epoch = 0;
    let mut best_metric = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, table, &vocab, &batch, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss * batch.len() as f64;
            clip_gradients(&mut grads, cfg.clip);
            state.step(&mut model.params, &grads, cfg.lr)?;
        }
        let snapshot = quantized(&model);
        let valid = if valid_set.num_turns() > 0 {
            let tracker = Tracker::new(&snapshot, table, freq);
            Some(evaluate(&tracker, valid_set, StateFeed::Predicted)?.0)
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            valid,
        };
        let improved = match (valid.map(|v| v.jg), best_metric) {
            (Some(jg), Some(b)) => jg > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        let keep_going = on_epoch(&metrics, &snapshot);
        if improved {
            best = snapshot;
            best_epoch = epoch;
            best_metric = valid.map(|v| v.jg);
        }
        history.push(metrics);
        if !keep_going {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        last: quantized(&model),
        history,
    })
}

#[cfg(test)]
mod tests;
