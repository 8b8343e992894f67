use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::belief::FrequencyTables;
use crate::embeddings::{load_embedding_file, EmbeddingError, EmbeddingSource, EmbeddingTable, Vocabulary};
use crate::model::{Model, ModelConfig, ModelError};
use crate::numcore::Tensor;

pub const CHECKPOINT_FORMAT: &str = "comer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch: header {expected}, blob {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Where the checkpoint's embedding table comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingSpec {
    Pseudo { dim: usize, seed: u64 },
    /// An embedding file, identified by the SHA-256 of its bytes.
    File { path: String, sha256: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    shapes: Vec<ParamShape>,
    seed: u64,
    epoch: usize,
    metric: Option<f64>,
    vocabulary: Vocabulary,
    embeddings: EmbeddingSpec,
    frequencies: FrequencyTables,
    checksum: String,
}

/// A model snapshot with everything needed to rebuild its tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub epoch: usize,
    /// Validation joint goal accuracy of this snapshot, if measured.
    pub metric: Option<f64>,
    pub vocabulary: Vocabulary,
    pub embeddings: EmbeddingSpec,
    pub frequencies: FrequencyTables,
}

impl Checkpoint {
    /// Builds the embedding table for a pseudo-embedding checkpoint, or
    /// from `file` (already verified) otherwise.
    pub fn table(&self, file: Option<&EmbeddingTable>) -> Result<EmbeddingTable, CheckpointError> {
        let source = self.source(file)?;
        Ok(self.vocabulary.build_table(&source)?)
    }

    pub fn source(&self, file: Option<&EmbeddingTable>) -> Result<EmbeddingSource, CheckpointError> {
        match (&self.embeddings, file) {
            (EmbeddingSpec::Pseudo { dim, seed }, _) => Ok(EmbeddingSource::Pseudo { dim: *dim, seed: *seed }),
            (EmbeddingSpec::File { .. }, Some(t)) => Ok(EmbeddingSource::File(t.clone())),
            (EmbeddingSpec::File { path, .. }, None) => {
                Err(CheckpointError::Format(format!("checkpoint needs embedding file {path}")))
            }
        }
    }
}

/// Header JSON line followed by the little-endian `f32` parameter blob.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut blob = Vec::with_capacity(ck.model.num_scalars() * 4);
    for (spec, t) in ck.model.params.specs().iter().zip(ck.model.params.values()) {
        for &x in t.data() {
            let f = x as f32;
            if !f.is_finite() {
                return Err(CheckpointError::Format(format!("parameter {} is not finite", spec.name)));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: ck.model.config.clone(),
        shapes: ck
            .model
            .params
            .specs()
            .iter()
            .map(|s| ParamShape {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
        seed: ck.seed,
        epoch: ck.epoch,
        metric: ck.metric,
        vocabulary: ck.vocabulary.clone(),
        embeddings: ck.embeddings.clone(),
        frequencies: ck.frequencies.clone(),
        checksum: hex::encode(Sha256::digest(&blob)),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(ck)?)?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Format("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..split]).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let blob = &bytes[split + 1..];
    let actual = hex::encode(Sha256::digest(blob));
    if actual != header.checksum {
        return Err(CheckpointError::Checksum {
            expected: header.checksum,
            actual,
        });
    }
    let expected: usize = header.shapes.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 4 {
        return Err(CheckpointError::Format(format!(
            "blob holds {} bytes, shapes need {}",
            blob.len(),
            expected * 4
        )));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut values = Vec::with_capacity(header.shapes.len());
    for s in &header.shapes {
        let n = s.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        values.push(Tensor::new(s.shape.clone(), data).map_err(ModelError::from)?);
    }
    let model = Model::from_values(header.config, values)?;
    for (spec, s) in model.params.specs().iter().zip(&header.shapes) {
        if spec.name != s.name {
            return Err(CheckpointError::Format(format!(
                "parameter {} found where {} was expected",
                s.name, spec.name
            )));
        }
    }
    Ok(Checkpoint {
        model,
        seed: header.seed,
        epoch: header.epoch,
        metric: header.metric,
        vocabulary: header.vocabulary,
        embeddings: header.embeddings,
        frequencies: header.frequencies,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String, std::io::Error> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// A checkpoint ready for inference.
#[derive(Debug, Clone)]
pub struct OpenedCheckpoint {
    pub checkpoint: Checkpoint,
    pub table: EmbeddingTable,
    pub source: EmbeddingSource,
}

/// Loads a checkpoint and rebuilds its embedding table. File-backed
/// checkpoints read `embedding_file`, or the recorded path when `None`, and
/// reject a file whose SHA-256 differs from the recorded one.
pub fn open_checkpoint(
    path: impl AsRef<Path>,
    embedding_file: Option<&Path>,
) -> Result<OpenedCheckpoint, CheckpointError> {
    let checkpoint = load_checkpoint(path)?;
    let file = match &checkpoint.embeddings {
        EmbeddingSpec::Pseudo { .. } => None,
        EmbeddingSpec::File { path, sha256 } => {
            let path = embedding_file.unwrap_or(Path::new(path));
            let actual = file_sha256(path)?;
            if &actual != sha256 {
                return Err(CheckpointError::Checksum {
                    expected: sha256.clone(),
                    actual,
                });
            }
            Some(load_embedding_file(path)?)
        }
    };
    let source = checkpoint.source(file.as_ref())?;
    let table = checkpoint.vocabulary.build_table(&source)?;
    Ok(OpenedCheckpoint {
        checkpoint,
        table,
        source,
    })
}

/// Rounds every parameter to the nearest `f32`.
pub fn quantized(model: &Model) -> Model {
    let mut out = model.clone();
    for t in out.params.values_mut() {
        for x in t.data_mut() {
            *x = *x as f32 as f64;
        }
    }
    out
}
