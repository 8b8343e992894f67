//! Static token embeddings: vocabulary entries followed by whole-unit
//! domain/slot entries, a deterministic pseudo-provider, and the on-disk
//! embedding file format.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numcore::Tensor;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const DASH: &str = "-";
pub const COMMA: &str = ",";
pub const SEMI: &str = ";";

/// Control surfaces in table order.
pub const CONTROL_TOKENS: [&str; 5] = [CLS, SEP, DASH, COMMA, SEMI];

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("empty token")]
    EmptyToken,
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("token {0:?} cannot be resolved and no fallback provider is enabled")]
    Unresolvable(String),
    #[error("duplicate token key {0:?}")]
    Duplicate(String),
    #[error("vector for {key:?} has length {got}, expected {expected}")]
    DimMismatch {
        key: String,
        expected: usize,
        got: usize,
    },
    #[error("vocabulary entry {0:?} added after the unit section began")]
    SectionOrder(String),
    #[error("malformed token key {0:?}")]
    BadKey(String),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error("checksum mismatch: header {expected}, records {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases and splits on whitespace; leading and trailing punctuation is
/// split off into separate tokens while interior characters (`20:45`,
/// `guest-house`) stay attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let is_punct = |c: char| c.is_ascii_punctuation() && c != '>';
        let mut start = 0;
        let mut end = chars.len();
        let mut trailing = Vec::new();
        while start < end && is_punct(chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        while end > start && is_punct(chars[end - 1]) {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Word,
    Domain,
    Slot,
    Control,
}

impl TokenKind {
    pub fn prefix(self) -> &'static str {
        match self {
            TokenKind::Word => "word",
            TokenKind::Domain => "domain",
            TokenKind::Slot => "slot",
            TokenKind::Control => "control",
        }
    }

    fn from_prefix(p: &str) -> Option<Self> {
        Some(match p {
            "word" => TokenKind::Word,
            "domain" => TokenKind::Domain,
            "slot" => TokenKind::Slot,
            "control" => TokenKind::Control,
            _ => return None,
        })
    }

    pub fn is_unit(self) -> bool {
        matches!(self, TokenKind::Domain | TokenKind::Slot)
    }
}

/// A generated or encoded unit: a word, a whole (possibly multi-word)
/// domain or slot, or a control token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenUnit {
    pub surface: String,
    pub kind: TokenKind,
}

impl TokenUnit {
    pub fn new(kind: TokenKind, surface: impl Into<String>) -> Self {
        TokenUnit {
            surface: surface.into(),
            kind,
        }
    }

    pub fn word(surface: impl Into<String>) -> Self {
        Self::new(TokenKind::Word, surface)
    }

    pub fn domain(surface: impl Into<String>) -> Self {
        Self::new(TokenKind::Domain, surface)
    }

    pub fn slot(surface: impl Into<String>) -> Self {
        Self::new(TokenKind::Slot, surface)
    }

    pub fn control(surface: &str) -> Self {
        Self::new(TokenKind::Control, surface)
    }

    pub fn cls() -> Self {
        Self::control(CLS)
    }

    pub fn sep() -> Self {
        Self::control(SEP)
    }

    /// Kind-qualified table key, e.g. `slot:price range`.
    pub fn key(&self) -> String {
        format!("{}:{}", self.kind.prefix(), self.surface)
    }

    pub fn from_key(key: &str) -> Result<Self, EmbeddingError> {
        let (prefix, surface) = key
            .split_once(':')
            .ok_or_else(|| EmbeddingError::BadKey(key.to_string()))?;
        let kind =
            TokenKind::from_prefix(prefix).ok_or_else(|| EmbeddingError::BadKey(key.to_string()))?;
        if surface.is_empty() {
            return Err(EmbeddingError::BadKey(key.to_string()));
        }
        Ok(TokenUnit::new(kind, surface))
    }

    /// Words making up a unit's surface.
    pub fn words(&self) -> Vec<String> {
        match self.kind {
            TokenKind::Control => vec![self.surface.clone()],
            _ => tokenize(&self.surface),
        }
    }
}

impl fmt::Display for TokenUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

/// Deterministic unit-norm stand-in vector for `token`.
pub fn pseudo_embed(token: &str, d_e: usize, seed: u64) -> Result<Vec<f64>, EmbeddingError> {
    if token.is_empty() {
        return Err(EmbeddingError::EmptyToken);
    }
    if d_e == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    loop {
        let v: Vec<f64> = (0..d_e).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Vocab,
    Unit,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Token key → fixed-length vector. Vocabulary entries precede unit entries
/// and indices follow insertion order. Stored values are rounded to 32-bit
/// precision so the table survives a file round trip bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    units: Vec<TokenUnit>,
    sections: Vec<Section>,
    data: Vec<f64>,
    index: HashMap<TokenUnit, usize>,
    fallback_seed: Option<u64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            units: Vec::new(),
            sections: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
            fallback_seed: None,
        }
    }

    /// Enables resolving unknown tokens through [`pseudo_embed`].
    pub fn with_fallback(mut self, seed: Option<u64>) -> Self {
        self.fallback_seed = seed;
        self
    }

    pub fn fallback_seed(&self) -> Option<u64> {
        self.fallback_seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn vocab_len(&self) -> usize {
        self.sections.iter().filter(|s| **s == Section::Vocab).count()
    }

    pub fn unit_len(&self) -> usize {
        self.len() - self.vocab_len()
    }

    pub fn insert(
        &mut self,
        unit: TokenUnit,
        section: Section,
        vector: &[f64],
    ) -> Result<usize, EmbeddingError> {
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                key: unit.key(),
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.index.contains_key(&unit) {
            return Err(EmbeddingError::Duplicate(unit.key()));
        }
        if section == Section::Vocab && self.sections.last() == Some(&Section::Unit) {
            return Err(EmbeddingError::SectionOrder(unit.key()));
        }
        let idx = self.units.len();
        self.data.extend(vector.iter().map(|&v| quantize(v)));
        self.index.insert(unit.clone(), idx);
        self.units.push(unit);
        self.sections.push(section);
        Ok(idx)
    }

    pub fn index_of(&self, unit: &TokenUnit) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, i: usize) -> &TokenUnit {
        &self.units[i]
    }

    pub fn section(&self, i: usize) -> Section {
        self.sections[i]
    }

    pub fn units(&self) -> &[TokenUnit] {
        &self.units
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, unit: &TokenUnit) -> Option<&[f64]> {
        self.index_of(unit).map(|i| self.vector(i))
    }

    /// Table vector, or the pseudo-provider's vector when enabled.
    pub fn resolve(&self, unit: &TokenUnit) -> Result<Vec<f64>, EmbeddingError> {
        if let Some(v) = self.get(unit) {
            return Ok(v.to_vec());
        }
        match self.fallback_seed {
            Some(seed) => {
                let v = pseudo_embed(&unit.key(), self.dim, seed)?;
                Ok(v.into_iter().map(quantize).collect())
            }
            None => Err(EmbeddingError::Unresolvable(unit.key())),
        }
    }

    /// All vectors as a `[len × dim]` matrix.
    pub fn matrix(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("consistent table")
    }

    /// Rows `indices` as a matrix.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.vector(i));
        }
        Tensor::matrix(indices.len(), self.dim, data).expect("consistent table")
    }

    fn first_unit_index(&self) -> usize {
        self.vocab_len()
    }
}

/// Mean of the unit's word vectors.
pub fn build_unit_embedding(
    unit: &TokenUnit,
    word_vectors: &EmbeddingTable,
) -> Result<Vec<f64>, EmbeddingError> {
    let words = unit.words();
    if words.is_empty() {
        return Err(EmbeddingError::EmptyToken);
    }
    let mut acc = vec![0.0; word_vectors.dim()];
    for w in &words {
        let v = word_vectors.resolve(&TokenUnit::word(w.as_str()))?;
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
    }
    let k = words.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// Vocabulary section of `e_v` followed by every entry of `e_s` as units.
pub fn compose_embedding(
    e_v: &EmbeddingTable,
    e_s: &EmbeddingTable,
) -> Result<EmbeddingTable, EmbeddingError> {
    if e_v.dim() != e_s.dim() {
        return Err(EmbeddingError::DimMismatch {
            key: "<table>".to_string(),
            expected: e_v.dim(),
            got: e_s.dim(),
        });
    }
    let mut out = EmbeddingTable::new(e_v.dim()).with_fallback(e_v.fallback_seed);
    for i in 0..e_v.len() {
        out.insert(e_v.unit(i).clone(), Section::Vocab, e_v.vector(i))?;
    }
    for i in 0..e_s.len() {
        out.insert(e_s.unit(i).clone(), Section::Unit, e_s.vector(i))?;
    }
    debug_assert_eq!(out.first_unit_index(), e_v.len());
    Ok(out)
}

/// Where word vectors come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    Pseudo { dim: usize, seed: u64 },
    File(EmbeddingTable),
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Pseudo { dim, .. } => *dim,
            EmbeddingSource::File(t) => t.dim(),
        }
    }

    fn lookup_table(&self) -> EmbeddingTable {
        match self {
            EmbeddingSource::Pseudo { dim, seed } => EmbeddingTable::new(*dim).with_fallback(Some(*seed)),
            EmbeddingSource::File(t) => t.clone(),
        }
    }
}

/// The token inventory a table is built for.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: BTreeSet<String>,
    pub domains: BTreeSet<String>,
    pub slots: BTreeSet<String>,
}

impl Vocabulary {
    pub fn merge(&mut self, other: &Vocabulary) {
        self.words.extend(other.words.iter().cloned());
        self.domains.extend(other.domains.iter().cloned());
        self.slots.extend(other.slots.iter().cloned());
    }

    /// Builds `E = E_v ⊕ E_s`: control tokens, then words in sorted order,
    /// then domains and slots, each averaged from their words.
    pub fn build_table(&self, source: &EmbeddingSource) -> Result<EmbeddingTable, EmbeddingError> {
        let lookup = source.lookup_table();
        let mut e_v = EmbeddingTable::new(source.dim()).with_fallback(lookup.fallback_seed());
        let controls = CONTROL_TOKENS.iter().map(|c| TokenUnit::control(c));
        let words = self.words.iter().map(|w| TokenUnit::word(w.as_str()));
        for unit in controls.chain(words) {
            let v = lookup.resolve(&unit)?;
            e_v.insert(unit, Section::Vocab, &v)?;
        }
        let mut e_s = EmbeddingTable::new(source.dim());
        let domains = self.domains.iter().map(|d| TokenUnit::domain(d.as_str()));
        let slots = self.slots.iter().map(|s| TokenUnit::slot(s.as_str()));
        for unit in domains.chain(slots) {
            let v = match lookup.get(&unit) {
                Some(v) => v.to_vec(),
                None => build_unit_embedding(&unit, &lookup)?,
            };
            e_s.insert(unit, Section::Unit, &v)?;
        }
        compose_embedding(&e_v, &e_s)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileCounts {
    vocab: usize,
    unit: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    context: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    version: u32,
    d_e: usize,
    counts: FileCounts,
    checksum: String,
}

/// Prefix of per-utterance contextual matrix records.
pub const CONTEXT_PREFIX: &str = "context:";

/// Contents of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub table: EmbeddingTable,
    /// Utterance id → `[rows × d_e]` contextual embedding matrix.
    pub contextual: BTreeMap<String, Tensor>,
}

fn encode_floats(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_floats(text: &str) -> Result<Vec<f64>, EmbeddingError> {
    let bytes = BASE64
        .decode(text.trim_end_matches('\r'))
        .map_err(|e| EmbeddingError::Format(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(EmbeddingError::Format("payload not a multiple of 4 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Serializes a table (and optional contextual matrices) in the embedding
/// file format.
pub fn embedding_file_bytes(
    table: &EmbeddingTable,
    contextual: &BTreeMap<String, Tensor>,
) -> Vec<u8> {
    let mut records = String::new();
    for i in 0..table.len() {
        records.push_str(&table.unit(i).key());
        records.push('\t');
        records.push_str(&encode_floats(table.vector(i)));
        records.push('\n');
    }
    for (id, m) in contextual {
        records.push_str(CONTEXT_PREFIX);
        records.push_str(id);
        records.push('\t');
        records.push_str(&encode_floats(m.data()));
        records.push('\n');
    }
    let header = FileHeader {
        version: 1,
        d_e: table.dim(),
        counts: FileCounts {
            vocab: table.vocab_len(),
            unit: table.unit_len(),
            context: contextual.len(),
        },
        checksum: hex::encode(Sha256::digest(records.as_bytes())),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(records.as_bytes());
    out
}

pub fn write_embedding_file(
    path: impl AsRef<Path>,
    table: &EmbeddingTable,
    contextual: &BTreeMap<String, Tensor>,
) -> Result<(), EmbeddingError> {
    std::fs::write(path, embedding_file_bytes(table, contextual))?;
    Ok(())
}

/// Parses and validates an embedding file held in memory.
pub fn parse_embedding_file(bytes: &[u8]) -> Result<EmbeddingFile, EmbeddingError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| EmbeddingError::Format("file is not UTF-8".into()))?;
    let (header_line, records) = text
        .split_once('\n')
        .ok_or_else(|| EmbeddingError::Format("missing header line".into()))?;
    let header: FileHeader = serde_json::from_str(header_line)
        .map_err(|e| EmbeddingError::Format(format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(EmbeddingError::Format(format!("unsupported version {}", header.version)));
    }
    if header.d_e == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    let actual = hex::encode(Sha256::digest(records.as_bytes()));
    if !actual.eq_ignore_ascii_case(&header.checksum) {
        return Err(EmbeddingError::Checksum {
            expected: header.checksum,
            actual,
        });
    }
    let expected_rows = header.counts.vocab + header.counts.unit + header.counts.context;
    let lines: Vec<&str> = records.lines().collect();
    if lines.len() != expected_rows {
        return Err(EmbeddingError::Format(format!(
            "header announces {expected_rows} records, found {}",
            lines.len()
        )));
    }
    let mut table = EmbeddingTable::new(header.d_e);
    let mut contextual = BTreeMap::new();
    for (n, line) in lines.iter().enumerate() {
        let (key, payload) = line
            .split_once('\t')
            .ok_or_else(|| EmbeddingError::Format(format!("record {n} has no tab")))?;
        let values = decode_floats(payload)?;
        if let Some(id) = key.strip_prefix(CONTEXT_PREFIX) {
            if values.is_empty() || values.len() % header.d_e != 0 {
                return Err(EmbeddingError::DimMismatch {
                    key: key.to_string(),
                    expected: header.d_e,
                    got: values.len(),
                });
            }
            let rows = values.len() / header.d_e;
            if contextual.contains_key(id) {
                return Err(EmbeddingError::Duplicate(key.to_string()));
            }
            contextual.insert(id.to_string(), Tensor::matrix(rows, header.d_e, values).expect("sized"));
            continue;
        }
        let unit = TokenUnit::from_key(key)?;
        let section = if n < header.counts.vocab {
            Section::Vocab
        } else {
            Section::Unit
        };
        table.insert(unit, section, &values)?;
    }
    if table.vocab_len() != header.counts.vocab || table.unit_len() != header.counts.unit {
        return Err(EmbeddingError::Format("section counts disagree with header".into()));
    }
    Ok(EmbeddingFile { table, contextual })
}

/// Loads a table; the whole file is validated before anything is returned.
pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingTable, EmbeddingError> {
    Ok(load_embedding_file_with_context(path)?.table)
}

pub fn load_embedding_file_with_context(
    path: impl AsRef<Path>,
) -> Result<EmbeddingFile, EmbeddingError> {
    let bytes = std::fs::read(path)?;
    parse_embedding_file(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_table(words: &[&str], dim: usize, seed: u64) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(dim).with_fallback(Some(seed));
        for w in words {
            let unit = TokenUnit::word(*w);
            let v = pseudo_embed(&unit.key(), dim, seed).unwrap();
            t.insert(unit, Section::Vocab, &v).unwrap();
        }
        t
    }

    #[test]
    fn tokenize_splits_edge_punctuation() {
        assert_eq!(tokenize("I want Cheap food."), ["i", "want", "cheap", "food", "."]);
        assert_eq!(tokenize("leave at 20:45, please"), ["leave", "at", "20:45", ",", "please"]);
        assert_eq!(tokenize("seafood > chinese"), ["seafood", ">", "chinese"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn pseudo_embed_is_deterministic_and_normalized() {
        let a = pseudo_embed("food", 16, 7).unwrap();
        let b = pseudo_embed("food", 16, 7).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_ne!(a, pseudo_embed("food", 16, 8).unwrap());
        assert!(matches!(pseudo_embed("", 16, 7), Err(EmbeddingError::EmptyToken)));
    }

    #[test]
    fn pseudo_embed_distinct_tokens() {
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let food = pseudo_embed("food", 16, 0).unwrap();
        let area = pseudo_embed("area", 16, 0).unwrap();
        assert!(cos(&food, &area).abs() < 0.9);

        let vecs: Vec<Vec<f64>> = (0..1000)
            .map(|i| pseudo_embed(&format!("token{i}"), 16, 0).unwrap())
            .collect();
        let mut max = 0.0f64;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                max = max.max(cos(&vecs[i], &vecs[j]).abs());
            }
        }
        assert!(max < 0.99, "{max}");
    }

    #[test]
    fn unit_embedding_is_word_mean() {
        let t = pseudo_table(&["food"], 8, 1);
        let single = build_unit_embedding(&TokenUnit::slot("food"), &t).unwrap();
        assert_eq!(single.as_slice(), t.get(&TokenUnit::word("food")).unwrap());

        let mut two = EmbeddingTable::new(2);
        two.insert(TokenUnit::word("price"), Section::Vocab, &[1.0, 0.0]).unwrap();
        two.insert(TokenUnit::word("range"), Section::Vocab, &[0.0, 1.0]).unwrap();
        let v = build_unit_embedding(&TokenUnit::slot("price range"), &two).unwrap();
        assert_eq!(v, vec![0.5, 0.5]);

        let t = pseudo_table(&["leave", "at"], 12, 3);
        let v = build_unit_embedding(&TokenUnit::slot("leave at"), &t).unwrap();
        let leave = t.get(&TokenUnit::word("leave")).unwrap();
        let at = t.get(&TokenUnit::word("at")).unwrap();
        for i in 0..12 {
            assert!((v[i] - (leave[i] + at[i]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_embedding_unresolvable_without_fallback() {
        let t = EmbeddingTable::new(4);
        assert!(matches!(
            build_unit_embedding(&TokenUnit::slot("price range"), &t),
            Err(EmbeddingError::Unresolvable(_))
        ));
    }

    #[test]
    fn compose_counts_and_ordering() {
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let e_v = pseudo_table(&refs, 4, 0);
        let mut e_s = EmbeddingTable::new(4);
        for i in 0..35 {
            let u = TokenUnit::slot(format!("slot {i}"));
            let v = pseudo_embed(&u.key(), 4, 0).unwrap();
            e_s.insert(u, Section::Unit, &v).unwrap();
        }
        let e = compose_embedding(&e_v, &e_s).unwrap();
        assert_eq!(e.len(), 135);
        assert_eq!(e.index_of(&TokenUnit::slot("slot 0")), Some(100));
        assert_eq!(e.get(&TokenUnit::slot("slot 7")), e_s.get(&TokenUnit::slot("slot 7")));
        assert!(compose_embedding(&e_v, &EmbeddingTable::new(5)).is_err());
    }

    #[test]
    fn kind_qualified_keys_do_not_collide() {
        let mut t = EmbeddingTable::new(2);
        t.insert(TokenUnit::word("food"), Section::Vocab, &[1.0, 0.0]).unwrap();
        t.insert(TokenUnit::slot("food"), Section::Unit, &[1.0, 0.0]).unwrap();
        assert!(matches!(
            t.insert(TokenUnit::slot("food"), Section::Unit, &[0.0, 1.0]),
            Err(EmbeddingError::Duplicate(_))
        ));
        assert!(matches!(
            t.insert(TokenUnit::word("late"), Section::Vocab, &[0.0, 1.0]),
            Err(EmbeddingError::SectionOrder(_))
        ));
        assert_eq!(TokenUnit::from_key("slot:price range").unwrap(), TokenUnit::slot("price range"));
        assert!(TokenUnit::from_key("nonsense").is_err());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let words = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let mut t = pseudo_table(&words, 6, 9);
        for u in [TokenUnit::domain("train"), TokenUnit::slot("leave at")] {
            let v = build_unit_embedding(&u, &t).unwrap();
            t.insert(u, Section::Unit, &v).unwrap();
        }
        assert_eq!(t.len(), 10);
        let bytes = embedding_file_bytes(&t, &BTreeMap::new());
        let back = parse_embedding_file(&bytes).unwrap();
        assert_eq!(back.table.units(), t.units());
        for i in 0..t.len() {
            assert_eq!(back.table.vector(i), t.vector(i));
            assert_eq!(back.table.section(i), t.section(i));
        }
    }

    #[test]
    fn file_with_contextual_matrices() {
        let t = pseudo_table(&["x"], 3, 0);
        let mut ctx = BTreeMap::new();
        ctx.insert("utt-1".to_string(), Tensor::matrix(5, 3, vec![0.25; 15]).unwrap());
        let back = parse_embedding_file(&embedding_file_bytes(&t, &ctx)).unwrap();
        assert_eq!(back.contextual["utt-1"].shape(), &[5, 3]);
    }

    #[test]
    fn file_rejects_corruption() {
        let t = pseudo_table(&["a", "b", "c"], 4, 0);
        let bytes = embedding_file_bytes(&t, &BTreeMap::new());
        let truncated = &bytes[..bytes.len() - 10];
        assert!(parse_embedding_file(truncated).is_err());

        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] = if flipped[last] == b'A' { b'B' } else { b'A' };
        assert!(matches!(parse_embedding_file(&flipped), Err(EmbeddingError::Checksum { .. })));

        assert!(matches!(parse_embedding_file(b"not json\n"), Err(EmbeddingError::Format(_))));
    }

    #[test]
    fn file_rejects_dim_mismatch_and_duplicates() {
        let row = |key: &str, n: usize| format!("{key}\t{}\n", encode_floats(&vec![0.5; n]));
        let build = |records: String, vocab: usize| {
            let header = format!(
                "{{\"version\":1,\"d_e\":4,\"counts\":{{\"vocab\":{vocab},\"unit\":0}},\"checksum\":\"{}\"}}\n",
                hex::encode(Sha256::digest(records.as_bytes()))
            );
            [header.into_bytes(), records.into_bytes()].concat()
        };
        let bad_dim = build(row("word:a", 4) + &row("word:b", 3), 2);
        assert!(matches!(parse_embedding_file(&bad_dim), Err(EmbeddingError::DimMismatch { .. })));
        let dup = build(row("word:a", 4) + &row("word:a", 4), 2);
        assert!(matches!(parse_embedding_file(&dup), Err(EmbeddingError::Duplicate(_))));
    }

    #[test]
    fn load_reports_d_e_of_large_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("large.emb");
        let t = pseudo_table(&["price", "range"], 1024, 4);
        write_embedding_file(&path, &t, &BTreeMap::new()).unwrap();
        let loaded = load_embedding_file(&path).unwrap();
        assert_eq!(loaded.dim(), 1024);
    }

    #[test]
    fn vocabulary_table_is_stable() {
        let mut vocab = Vocabulary::default();
        vocab.words.extend(["cheap", "price", "range"].map(String::from));
        vocab.domains.insert("restaurant".into());
        vocab.slots.insert("price range".into());
        let src = EmbeddingSource::Pseudo { dim: 8, seed: 2 };
        let a = vocab.build_table(&src).unwrap();
        let b = vocab.build_table(&src).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.index_of(&TokenUnit::cls()), Some(0));
        assert_eq!(a.vocab_len(), CONTROL_TOKENS.len() + 3);
        assert_eq!(a.index_of(&TokenUnit::domain("restaurant")), Some(a.vocab_len()));
    }
}
