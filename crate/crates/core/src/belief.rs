//! Belief states: the nested domain → slot → value structure, its canonical
//! ordering, and the flat token form the decoder reads and writes.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::embeddings::{tokenize, TokenKind, TokenUnit, CONTROL_TOKENS, DASH, COMMA, SEMI};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BeliefError {
    #[error("empty {0} name")]
    EmptyName(&'static str),
    #[error("empty value for {domain}/{slot}")]
    EmptyValue { domain: String, slot: String },
    #[error("domain name {0:?} contains ';'")]
    DomainSeparator(String),
    #[error("value token {0:?} is a reserved delimiter or not a single token")]
    ReservedToken(String),
    #[error("malformed flat state at position {position}: {reason}")]
    Malformed { position: usize, reason: &'static str },
}

/// One `(domain, slot, value)` triplet.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub domain: String,
    pub slot: String,
    pub value: Vec<String>,
}

impl Triplet {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>, value: &str) -> Self {
        Triplet {
            domain: domain.into(),
            slot: slot.into(),
            value: tokenize(value),
        }
    }

    fn has_empty_component(&self) -> bool {
        self.domain.trim().is_empty()
            || self.slot.trim().is_empty()
            || self.value.iter().all(|t| t.trim().is_empty())
    }
}

/// Lowercases and collapses whitespace in a domain or slot name.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_reserved(token: &str) -> bool {
    CONTROL_TOKENS.contains(&token)
}

fn check_value_token(token: &str) -> Result<(), BeliefError> {
    if token.is_empty() || is_reserved(token) || token.chars().any(char::is_whitespace) {
        return Err(BeliefError::ReservedToken(token.to_string()));
    }
    Ok(())
}

/// Accumulated user goals at one turn. Insertion order is the generation
/// order; equality ignores order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeliefState {
    domains: IndexMap<String, IndexMap<String, Vec<String>>>,
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `domain/slot` to `value`. A repeated pair moves to the end of its
    /// domain.
    pub fn insert(
        &mut self,
        domain: &str,
        slot: &str,
        value: Vec<String>,
    ) -> Result<(), BeliefError> {
        let domain = normalize_name(domain);
        let slot = normalize_name(slot);
        if domain.is_empty() {
            return Err(BeliefError::EmptyName("domain"));
        }
        if slot.is_empty() {
            return Err(BeliefError::EmptyName("slot"));
        }
        if domain.contains(';') {
            return Err(BeliefError::DomainSeparator(domain));
        }
        if value.is_empty() {
            return Err(BeliefError::EmptyValue { domain, slot });
        }
        for t in &value {
            check_value_token(t)?;
        }
        let slots = self.domains.entry(domain).or_default();
        slots.shift_remove(&slot);
        slots.insert(slot, value);
        Ok(())
    }

    /// [`insert`](Self::insert) with the value given as text. Stand-alone
    /// delimiter characters in the text are dropped.
    pub fn set(&mut self, domain: &str, slot: &str, value: &str) -> Result<(), BeliefError> {
        let tokens = tokenize(value).into_iter().filter(|t| !is_reserved(t)).collect();
        self.insert(domain, slot, tokens)
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&[String]> {
        self.domains.get(domain)?.get(slot).map(Vec::as_slice)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    pub fn slots(&self, domain: &str) -> impl Iterator<Item = (&str, &[String])> {
        self.domains
            .get(domain)
            .into_iter()
            .flat_map(|s| s.iter().map(|(k, v)| (k.as_str(), v.as_slice())))
    }

    /// Number of `(domain, slot)` pairs.
    pub fn len(&self) -> usize {
        self.domains.values().map(IndexMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        self.domains
            .iter()
            .flat_map(|(d, slots)| {
                slots.iter().map(move |(s, v)| Triplet {
                    domain: d.clone(),
                    slot: s.clone(),
                    value: v.clone(),
                })
            })
            .collect()
    }

    /// Builds a state from already post-processed triplets.
    pub fn from_triplets(triplets: &[Triplet]) -> Result<Self, BeliefError> {
        let mut b = BeliefState::new();
        for t in triplets {
            b.insert(&t.domain, &t.slot, t.value.clone())?;
        }
        Ok(b)
    }

    /// The set of domains, order-insensitive.
    pub fn domain_set(&self) -> std::collections::BTreeSet<&str> {
        self.domains().collect()
    }

    /// The set of `(domain, slot)` pairs, order-insensitive.
    pub fn domain_slot_set(&self) -> std::collections::BTreeSet<(&str, &str)> {
        self.domains
            .iter()
            .flat_map(|(d, s)| s.keys().map(move |k| (d.as_str(), k.as_str())))
            .collect()
    }

    /// Same content in the same order.
    pub fn identical(&self, other: &BeliefState) -> bool {
        self.triplets() == other.triplets()
    }
}

impl fmt::Display for BeliefState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = flatten(self)
            .map(|units| units.iter().map(|u| u.surface.as_str()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        f.write_str(&text)
    }
}

impl Serialize for BeliefState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let nested: IndexMap<&str, IndexMap<&str, String>> = self
            .domains
            .iter()
            .map(|(d, slots)| {
                let inner = slots.iter().map(|(s, v)| (s.as_str(), v.join(" "))).collect();
                (d.as_str(), inner)
            })
            .collect();
        nested.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BeliefState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let nested = IndexMap::<String, IndexMap<String, String>>::deserialize(deserializer)?;
        let mut b = BeliefState::new();
        for (d, slots) in nested {
            for (s, v) in slots {
                b.set(&d, &s, &v).map_err(D::Error::custom)?;
            }
        }
        Ok(b)
    }
}

/// Training-set occurrence counts used for canonical ordering.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTables {
    pub domains: BTreeMap<String, u64>,
    /// domain → slot → count.
    pub slots: BTreeMap<String, BTreeMap<String, u64>>,
}

impl FrequencyTables {
    pub fn domain(&self, domain: &str) -> u64 {
        self.domains.get(domain).copied().unwrap_or(0)
    }

    pub fn slot(&self, domain: &str, slot: &str) -> u64 {
        self.slots
            .get(domain)
            .and_then(|s| s.get(slot))
            .copied()
            .unwrap_or(0)
    }

    /// Adds one turn label.
    pub fn observe(&mut self, label: &BeliefState) {
        for d in label.domains() {
            *self.domains.entry(d.to_string()).or_default() += 1;
            let slots = self.slots.entry(d.to_string()).or_default();
            for (s, _) in label.slots(d) {
                *slots.entry(s.to_string()).or_default() += 1;
            }
        }
    }
}

/// Counts every domain and `(domain, slot)` once per turn label it appears in.
pub fn compute_frequencies<'a>(labels: impl IntoIterator<Item = &'a BeliefState>) -> FrequencyTables {
    let mut f = FrequencyTables::default();
    for label in labels {
        f.observe(label);
    }
    f
}

fn by_frequency(count: impl Fn(&str) -> u64) -> impl Fn(&&str, &&str) -> std::cmp::Ordering {
    move |a, b| count(b).cmp(&count(a)).then_with(|| a.cmp(b))
}

/// Domains by descending frequency, slots by descending in-domain
/// frequency, ties lexicographic.
pub fn canonical_order(b: &BeliefState, freq: &FrequencyTables) -> BeliefState {
    let mut domains: Vec<&str> = b.domains().collect();
    domains.sort_by(by_frequency(|d| freq.domain(d)));
    let mut out = BeliefState::new();
    for d in domains {
        let mut slots: Vec<&str> = b.slots(d).map(|(s, _)| s).collect();
        slots.sort_by(by_frequency(|s| freq.slot(d, s)));
        let inner = out.domains.entry(d.to_string()).or_default();
        for s in slots {
            inner.insert(s.to_string(), b.domains[d][s].clone());
        }
    }
    out
}

/// Flat token sequence: `domain - slot , value… ; slot , value… ; domain - …`.
pub type FlatState = Vec<TokenUnit>;

/// Emits the flat paradigm in the state's own order, trailing `;` included.
pub fn flatten(b: &BeliefState) -> Result<FlatState, BeliefError> {
    let mut out = Vec::new();
    for (d, slots) in &b.domains {
        out.push(TokenUnit::domain(d.as_str()));
        out.push(TokenUnit::control(DASH));
        for (s, v) in slots {
            out.push(TokenUnit::slot(s.as_str()));
            out.push(TokenUnit::control(COMMA));
            for t in v {
                check_value_token(t)?;
                out.push(TokenUnit::word(t.as_str()));
            }
            out.push(TokenUnit::control(SEMI));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Any deviation from the grammar is an error.
    Strict,
    /// Malformed triplets are skipped.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Domain,
    Dash,
    Slot,
    Comma,
    Value,
}

fn is_control(unit: &TokenUnit, c: &str) -> bool {
    unit.kind == TokenKind::Control && unit.surface == c
}

/// Inverse of [`flatten`].
pub fn parse_flat(flat: &[TokenUnit], mode: ParseMode) -> Result<BeliefState, BeliefError> {
    match mode {
        ParseMode::Strict => parse_strict(flat),
        ParseMode::Lenient => Ok(parse_lenient(flat)),
    }
}

fn parse_strict(flat: &[TokenUnit]) -> Result<BeliefState, BeliefError> {
    let fail = |position: usize, reason: &'static str| BeliefError::Malformed { position, reason };
    let mut b = BeliefState::new();
    let mut expect = Expect::Domain;
    let (mut domain, mut slot) = (String::new(), String::new());
    let mut value = Vec::new();
    let mut has_slot = false;
    for (i, unit) in flat.iter().enumerate() {
        match expect {
            Expect::Domain if unit.kind == TokenKind::Domain => {
                domain = unit.surface.clone();
                has_slot = false;
                expect = Expect::Dash;
            }
            Expect::Domain => return Err(fail(i, "expected a domain")),
            Expect::Dash if is_control(unit, DASH) => expect = Expect::Slot,
            Expect::Dash => return Err(fail(i, "expected '-' after domain")),
            Expect::Slot => match unit.kind {
                TokenKind::Slot => {
                    slot = unit.surface.clone();
                    expect = Expect::Comma;
                }
                TokenKind::Domain if has_slot => {
                    domain = unit.surface.clone();
                    has_slot = false;
                    expect = Expect::Dash;
                }
                TokenKind::Domain => return Err(fail(i, "domain without slots")),
                _ => return Err(fail(i, "expected a slot")),
            },
            Expect::Comma if is_control(unit, COMMA) => expect = Expect::Value,
            Expect::Comma => return Err(fail(i, "value before slot delimiter")),
            Expect::Value if unit.kind == TokenKind::Word => value.push(unit.surface.clone()),
            Expect::Value if is_control(unit, SEMI) => {
                if value.is_empty() {
                    return Err(fail(i, "empty value"));
                }
                b.insert(&domain, &slot, std::mem::take(&mut value))?;
                has_slot = true;
                expect = Expect::Slot;
            }
            Expect::Value => return Err(fail(i, "value interrupted")),
        }
    }
    match expect {
        Expect::Domain => Ok(b),
        Expect::Slot if has_slot => Ok(b),
        Expect::Slot => Err(fail(flat.len(), "domain without slots")),
        _ => Err(fail(flat.len(), "dangling delimiter")),
    }
}

fn parse_lenient(flat: &[TokenUnit]) -> BeliefState {
    let mut triplets = Vec::new();
    let mut expect = Expect::Domain;
    let (mut domain, mut slot) = (String::new(), String::new());
    let mut value = Vec::new();
    for unit in flat {
        if unit.kind == TokenKind::Domain {
            domain = unit.surface.clone();
            expect = Expect::Dash;
            continue;
        }
        if unit.kind == TokenKind::Slot && expect != Expect::Domain {
            slot = unit.surface.clone();
            expect = Expect::Comma;
            continue;
        }
        match expect {
            Expect::Dash if is_control(unit, DASH) => expect = Expect::Slot,
            Expect::Comma if is_control(unit, COMMA) => {
                value.clear();
                expect = Expect::Value;
            }
            Expect::Value if unit.kind == TokenKind::Word => value.push(unit.surface.clone()),
            Expect::Value if is_control(unit, SEMI) => {
                triplets.push(Triplet {
                    domain: domain.clone(),
                    slot: slot.clone(),
                    value: std::mem::take(&mut value),
                });
                expect = Expect::Slot;
            }
            _ => {}
        }
    }
    let mut b = BeliefState::new();
    for t in postprocess(triplets) {
        let _ = b.insert(&t.domain, &t.slot, t.value);
    }
    b
}

/// Drops triplets with an empty component; a repeated `(domain, slot)`
/// keeps only its last occurrence, at that position.
pub fn postprocess(triplets: Vec<Triplet>) -> Vec<Triplet> {
    let kept: Vec<Triplet> = triplets.into_iter().filter(|t| !t.has_empty_component()).collect();
    let mut last = std::collections::HashMap::new();
    for (i, t) in kept.iter().enumerate() {
        last.insert((t.domain.clone(), t.slot.clone()), i);
    }
    kept.into_iter()
        .enumerate()
        .filter(|(i, t)| last[&(t.domain.clone(), t.slot.clone())] == *i)
        .map(|(_, t)| t)
        .collect()
}

/// Key of a combined slot: `domain;slot`.
pub fn combined_key(domain: &str, slot: &str) -> String {
    format!("{domain};{slot}")
}

/// Splits a combined slot at its first `;`.
pub fn split_combined(key: &str) -> Option<(&str, &str)> {
    key.split_once(';').filter(|(d, s)| !d.is_empty() && !s.is_empty())
}

/// The state as a flat list of combined slots.
pub fn to_combined(b: &BeliefState) -> Vec<(String, Vec<String>)> {
    b.triplets()
        .into_iter()
        .map(|t| (combined_key(&t.domain, &t.slot), t.value))
        .collect()
}

pub fn from_combined(pairs: &[(String, Vec<String>)]) -> Result<BeliefState, BeliefError> {
    let mut b = BeliefState::new();
    for (key, v) in pairs {
        let (d, s) = split_combined(key).ok_or(BeliefError::EmptyName("combined slot"))?;
        b.insert(d, s, v.clone())?;
    }
    Ok(b)
}
