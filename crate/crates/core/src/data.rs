//! Corpus loading for WoZ2.0- and MultiWoZ-shaped JSON, corpus statistics,
//! and a seeded synthetic dialogue generator.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::belief::{BeliefError, BeliefState};
use crate::embeddings::{tokenize, Vocabulary, CONTROL_TOKENS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema violation at {at}: {message}")]
    Schema { at: String, message: String },
    #[error("corpus is empty")]
    Empty,
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

fn schema(at: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Schema {
        at: at.into(),
        message: message.into(),
    }
}

/// One dialogue turn: the preceding system transcript, the user utterance
/// and the accumulated gold state after the utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub system: Vec<String>,
    pub user: Vec<String>,
    pub belief: BeliefState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn num_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.dialogues.iter().flat_map(|d| &d.turns)
    }

    pub fn labels(&self) -> impl Iterator<Item = &BeliefState> {
        self.turns().map(|t| &t.belief)
    }

    /// Every word, domain and slot the corpus mentions.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut v = Vocabulary::default();
        let keep = |w: &&String| !CONTROL_TOKENS.contains(&w.as_str());
        for t in self.turns() {
            v.words.extend(t.system.iter().filter(keep).cloned());
            v.words.extend(t.user.iter().filter(keep).cloned());
            for tr in t.belief.triplets() {
                v.words.extend(tr.value.iter().cloned());
                v.domains.insert(tr.domain);
                v.slots.insert(tr.slot);
            }
        }
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CanonicalCorpus::from(self)).expect("corpus serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Woz,
    Multiwoz,
    Canonical,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalCorpus {
    dialogues: Vec<CanonicalDialogue>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalDialogue {
    id: String,
    turns: Vec<CanonicalTurn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalTurn {
    #[serde(default)]
    system: String,
    user: String,
    #[serde(default)]
    belief: BeliefState,
}

impl From<&Corpus> for CanonicalCorpus {
    fn from(c: &Corpus) -> Self {
        CanonicalCorpus {
            dialogues: c
                .dialogues
                .iter()
                .map(|d| CanonicalDialogue {
                    id: d.id.clone(),
                    turns: d
                        .turns
                        .iter()
                        .map(|t| CanonicalTurn {
                            system: t.system.join(" "),
                            user: t.user.join(" "),
                            belief: t.belief.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl From<CanonicalCorpus> for Corpus {
    fn from(c: CanonicalCorpus) -> Self {
        Corpus {
            dialogues: c
                .dialogues
                .into_iter()
                .map(|d| Dialogue {
                    id: d.id,
                    turns: d
                        .turns
                        .into_iter()
                        .map(|t| Turn {
                            system: tokenize(&t.system),
                            user: tokenize(&t.user),
                            belief: t.belief,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let json_err = |source| DataError::Json {
        path: path.to_path_buf(),
        source,
    };
    match format {
        CorpusFormat::Canonical => {
            let c: CanonicalCorpus = serde_json::from_str(&text).map_err(json_err)?;
            Ok(c.into())
        }
        CorpusFormat::Woz => parse_woz(&serde_json::from_str(&text).map_err(json_err)?),
        CorpusFormat::Multiwoz => parse_multiwoz(&serde_json::from_str(&text).map_err(json_err)?),
    }
}

fn field<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a Value, DataError> {
    v.get(key).ok_or_else(|| schema(at, format!("missing field {key:?}")))
}

fn string_field(v: &Value, key: &str, at: &str) -> Result<String, DataError> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(format!("{at}.{key}"), "expected a string")),
    }
}

fn array<'a>(v: &'a Value, at: &str) -> Result<&'a Vec<Value>, DataError> {
    v.as_array().ok_or_else(|| schema(at, "expected an array"))
}

fn id_of(v: &Value, key: &str, fallback: usize) -> String {
    match v.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => fallback.to_string(),
    }
}

fn is_empty_value(value: &str) -> bool {
    let v = value.trim().to_lowercase();
    v.is_empty() || v == "not mentioned" || v == "none"
}

/// Adds `(domain, slot, value)` unless the value is empty or a placeholder.
fn add_label(b: &mut BeliefState, domain: &str, slot: &str, value: &str) -> Result<(), DataError> {
    if is_empty_value(value) || domain.trim().is_empty() || slot.trim().is_empty() {
        return Ok(());
    }
    match b.set(domain, slot, value) {
        Ok(()) | Err(BeliefError::EmptyValue { .. }) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

/// WoZ2.0 / TRADE list layout. `split_domain` reads `domain-slot` names.
fn parse_turn_list(root: &Value, split_domain: bool) -> Result<Corpus, DataError> {
    let mut corpus = Corpus::default();
    for (i, d) in array(root, "$")?.iter().enumerate() {
        let at = format!("$[{i}]");
        let turns_json = array(field(d, "dialogue", &at)?, &format!("{at}.dialogue"))?;
        let mut turns = Vec::with_capacity(turns_json.len());
        for (j, t) in turns_json.iter().enumerate() {
            let at = format!("{at}.dialogue[{j}]");
            let system = string_field(t, "system_transcript", &at)?;
            let user = string_field(t, "transcript", &at)?;
            let mut belief = BeliefState::new();
            let entries = array(field(t, "belief_state", &at)?, &format!("{at}.belief_state"))?;
            for (k, e) in entries.iter().enumerate() {
                let at = format!("{at}.belief_state[{k}]");
                if e.get("act").and_then(Value::as_str).is_some_and(|a| a != "inform") {
                    continue;
                }
                for (m, pair) in array(field(e, "slots", &at)?, &format!("{at}.slots"))?.iter().enumerate() {
                    let at = format!("{at}.slots[{m}]");
                    let pair = array(pair, &at)?;
                    let (Some(name), Some(value)) = (
                        pair.first().and_then(Value::as_str),
                        pair.get(1).and_then(Value::as_str),
                    ) else {
                        return Err(schema(at, "expected [slot, value] strings"));
                    };
                    if split_domain {
                        let (domain, slot) = name
                            .split_once('-')
                            .ok_or_else(|| schema(&at, format!("slot {name:?} lacks a domain prefix")))?;
                        add_label(&mut belief, domain, &normalize_slot(slot), value)?;
                    } else if name != "name" {
                        add_label(&mut belief, "restaurant", name, value)?;
                    }
                }
            }
            turns.push(Turn {
                system: tokenize(&system),
                user: tokenize(&user),
                belief,
            });
        }
        corpus.dialogues.push(Dialogue {
            id: id_of(d, "dialogue_idx", i),
            turns,
        });
    }
    Ok(corpus)
}

/// The WoZ2.0 layout: `inform` slots only, `name` dropped, all
/// under the `restaurant` domain.
pub fn parse_woz(root: &Value) -> Result<Corpus, DataError> {
    parse_turn_list(root, false)
}

/// MultiWoZ as either the raw `data.json` object or the turn-list layout
/// with `domain-slot` names.
pub fn parse_multiwoz(root: &Value) -> Result<Corpus, DataError> {
    match root {
        Value::Array(_) => parse_turn_list(root, true),
        Value::Object(map) => {
            let mut corpus = Corpus::default();
            for (id, d) in map {
                corpus.dialogues.push(parse_raw_multiwoz_dialogue(id, d)?);
            }
            Ok(corpus)
        }
        _ => Err(schema("$", "expected an object or an array")),
    }
}

/// `leaveAt` → `leave at`, `pricerange` → `price range`.
pub fn normalize_slot(name: &str) -> String {
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_uppercase() && i > 0 {
            out.push(' ');
        }
        out.extend(c.to_lowercase());
    }
    match out.trim() {
        "pricerange" => "price range".into(),
        "arriveby" => "arrive by".into(),
        "leaveat" => "leave at".into(),
        other => other.to_string(),
    }
}

fn parse_raw_multiwoz_dialogue(id: &str, d: &Value) -> Result<Dialogue, DataError> {
    let at = format!("$[{id:?}]");
    let log = array(field(d, "log", &at)?, &format!("{at}.log"))?;
    let mut turns = Vec::new();
    let mut system = String::new();
    for (k, pair) in log.chunks(2).enumerate() {
        let user = string_field(&pair[0], "text", &format!("{at}.log[{}]", 2 * k))?;
        let mut belief = BeliefState::new();
        if let Some(sys) = pair.get(1) {
            let at = format!("{at}.log[{}]", 2 * k + 1);
            let meta = field(sys, "metadata", &at)?
                .as_object()
                .ok_or_else(|| schema(format!("{at}.metadata"), "expected an object"))?;
            for (domain, dv) in meta {
                let at = format!("{at}.metadata.{domain}");
                if let Some(semi) = dv.get("semi").and_then(Value::as_object) {
                    for (slot, value) in semi {
                        if let Some(v) = value.as_str() {
                            add_label(&mut belief, domain, &normalize_slot(slot), v)?;
                        }
                    }
                }
                if let Some(book) = dv.get("book").and_then(Value::as_object) {
                    for (slot, value) in book {
                        if slot == "booked" {
                            continue;
                        }
                        match value {
                            Value::String(v) => add_label(&mut belief, domain, &format!("book {}", normalize_slot(slot)), v)?,
                            Value::Array(_) | Value::Null => {}
                            _ => return Err(schema(format!("{at}.book.{slot}"), "expected a string")),
                        }
                    }
                }
            }
        }
        turns.push(Turn {
            system: tokenize(&system),
            user: tokenize(&user),
            belief,
        });
        system = match pair.get(1) {
            Some(s) => string_field(s, "text", &at)?,
            None => String::new(),
        };
    }
    Ok(Dialogue {
        id: id.to_string(),
        turns,
    })
}

/// A `(domain, slot)` present at one turn and missing at the next.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccumulationViolation {
    pub dialogue: String,
    pub turn: usize,
    pub domain: String,
    pub slot: String,
}

/// Reports pairs that disappear between consecutive turns. Value revisions
/// are allowed.
pub fn check_accumulation(corpus: &Corpus) -> Vec<AccumulationViolation> {
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        for (t, w) in d.turns.windows(2).enumerate() {
            for tr in w[0].belief.triplets() {
                if w[1].belief.get(&tr.domain, &tr.slot).is_none() {
                    out.push(AccumulationViolation {
                        dialogue: d.id.clone(),
                        turn: t + 1,
                        domain: tr.domain,
                        slot: tr.slot,
                    });
                }
            }
        }
    }
    out
}

/// Corpus size and ontology statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyStats {
    /// Mean turns per dialogue.
    pub t: f64,
    /// Mean user-utterance tokens per turn.
    pub s: f64,
    /// Distinct slot names.
    pub n_nested: usize,
    /// Distinct `(domain, slot)` pairs.
    pub n_combined: usize,
    /// Distinct value strings.
    pub m: usize,
    pub dialogues: usize,
    pub turns: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> Result<OntologyStats, DataError> {
    let turns = corpus.num_turns();
    if corpus.is_empty() || turns == 0 {
        return Err(DataError::Empty);
    }
    let tokens: usize = corpus.turns().map(|t| t.user.len()).sum();
    let mut slots = BTreeSet::new();
    let mut pairs = BTreeSet::new();
    let mut values = BTreeSet::new();
    for tr in corpus.labels().flat_map(BeliefState::triplets) {
        slots.insert(tr.slot.clone());
        values.insert(tr.value.join(" "));
        pairs.insert((tr.domain, tr.slot));
    }
    Ok(OntologyStats {
        t: turns as f64 / corpus.dialogues.len() as f64,
        s: tokens as f64 / turns as f64,
        n_nested: slots.len(),
        n_combined: pairs.len(),
        m: values.len(),
        dialogues: corpus.dialogues.len(),
        turns,
    })
}

/// Ontology shape of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: usize,
    pub slots: usize,
    pub values: usize,
}

const DOMAIN_NAMES: [&str; 7] = ["restaurant", "hotel", "train", "taxi", "attraction", "hospital", "police"];
const SLOT_NAMES: [&str; 12] = [
    "food", "area", "price range", "day", "people", "stay", "leave at", "arrive by", "destination",
    "departure", "type", "stars",
];
const VALUE_WORDS: [&str; 40] = [
    "cheap", "moderate", "expensive", "north", "south", "east", "west", "centre", "italian", "chinese",
    "indian", "french", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
    "cambridge", "ely", "norwich", "london", "stevenage", "10:30", "12:15", "17:45", "20:45", "museum",
    "park", "college", "theatre", "guesthouse", "yes", "no", "2", "3", "4", "5", "6",
];

fn pick_name(list: &[&str], i: usize, prefix: &str) -> String {
    list.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("{prefix}{i}"))
}

/// Ontology of a synthetic corpus: domain names, their slot names and each
/// slot's value strings.
pub fn synth_ontology(spec: SynthSpec) -> Vec<(String, Vec<(String, Vec<String>)>)> {
    let mut k = 0;
    (0..spec.domains)
        .map(|d| {
            let slots = (0..spec.slots)
                .map(|j| {
                    let slot = pick_name(&SLOT_NAMES, d * spec.slots + j, "slot");
                    let values = (0..spec.values)
                        .map(|_| {
                            k += 1;
                            pick_name(&VALUE_WORDS, k - 1, "value")
                        })
                        .collect();
                    (slot, values)
                })
                .collect();
            (pick_name(&DOMAIN_NAMES, d, "domain"), slots)
        })
        .collect()
}

/// Seeded templated dialogues. Each dialogue visits one or two domains and
/// introduces one or two slot values per turn; gold states accumulate.
pub fn gen_synthetic(spec: SynthSpec, n_dialogues: usize, seed: u64) -> Corpus {
    let spec = SynthSpec {
        domains: spec.domains.max(1),
        slots: spec.slots.max(1),
        values: spec.values.max(1),
    };
    let ontology = synth_ontology(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Corpus::default();
    for n in 0..n_dialogues {
        let mut order: Vec<usize> = (0..spec.domains).collect();
        order.shuffle(&mut rng);
        let n_domains = rng.random_range(1..=spec.domains.min(2));
        let mut script = Vec::new();
        for &d in &order[..n_domains] {
            let (domain, slots) = &ontology[d];
            let mut chosen: Vec<usize> = (0..slots.len()).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(rng.random_range(1..=slots.len()));
            for j in chosen {
                let (slot, values) = &slots[j];
                let value = values.choose(&mut rng).expect("values non-empty");
                script.push((domain.clone(), slot.clone(), value.clone()));
            }
        }
        let mut belief = BeliefState::new();
        let mut turns = Vec::new();
        let mut system = String::new();
        let mut i = 0;
        while i < script.len() {
            let take = rng.random_range(1..=2).min(script.len() - i);
            let batch = &script[i..i + take];
            let domain = &batch[0].0;
            let mut user = format!("i need a {domain}");
            for (k, (d, s, v)) in batch.iter().enumerate() {
                if d != domain {
                    user.push_str(&format!(" and a {d}"));
                }
                user.push_str(if k == 0 { " with " } else { " and " });
                user.push_str(&format!("{v} {s}"));
                belief.set(d, s, v).expect("synthetic labels are valid");
            }
            turns.push(Turn {
                system: tokenize(&system),
                user: tokenize(&user),
                belief: belief.clone(),
            });
            system = batch
                .iter()
                .map(|(_, s, v)| format!("{s} {v}"))
                .collect::<Vec<_>>()
                .join(" and ");
            system = format!("ok , {system} . anything else ?");
            i += take;
        }
        corpus.dialogues.push(Dialogue {
            id: format!("synth-{n:04}"),
            turns,
        });
    }
    corpus
}
