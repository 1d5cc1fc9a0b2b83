//! Knowledge-graph story state: triples, rule-based extraction, and the
//! graph-attention encoder.

mod encoder;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_word, Sentence};

pub use encoder::{encode_graph, graph_inputs, EncoderConfig, EncoderTrace, GraphEncoderParams};

#[derive(Debug, Error)]
pub enum KgError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

fn normalize(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// A `⟨subject, relation, object⟩` fact with lowercased, whitespace-collapsed
/// components.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    subject: String,
    relation: String,
    object: String,
}

impl Triple {
    /// `None` if any component is empty after normalization.
    pub fn new(subject: &str, relation: &str, object: &str) -> Option<Self> {
        let (s, r, o) = (normalize(subject), normalize(relation), normalize(object));
        if s.is_empty() || r.is_empty() || o.is_empty() {
            return None;
        }
        Some(Triple { subject: s, relation: r, object: o })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }
}

/// Immutable set of triples; updates return a new graph.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Subjects and objects, sorted.
    pub fn nodes(&self) -> BTreeSet<&str> {
        self.triples
            .iter()
            .flat_map(|t| [t.subject.as_str(), t.object.as_str()])
            .collect()
    }

    pub fn update<'a>(&self, triples: impl IntoIterator<Item = &'a Triple>) -> KnowledgeGraph {
        let mut next = self.clone();
        next.triples.extend(triples.into_iter().cloned());
        next
    }

    /// Triple TSV (sentence index 0 for every row).
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            let _ = writeln!(out, "{}\t{}\t{}\t0", t.subject, t.relation, t.object);
        }
        out
    }
}

pub fn update_graph(graph: &KnowledgeGraph, triples: &[Triple]) -> KnowledgeGraph {
    graph.update(triples)
}

const FUNCTION_WORDS: &[&str] = &[
    // determiners
    "the", "a", "an", "this", "that", "these", "those", "my", "your", "his", "its", "our", "their", "some",
    "any", "no", "every", "each", "all", "both", "another",
    // prepositions and particles
    "on", "in", "at", "to", "from", "with", "by", "for", "of", "into", "onto", "over", "under", "about",
    "through", "across", "after", "before", "behind", "beside", "between", "near", "toward", "towards",
    "upon", "without", "within", "around", "against", "along", "during", "off", "out", "up", "down",
    "away", "back",
    // conjunctions
    "and", "or", "but", "so", "yet", "nor", "then", "because", "while", "when", "if", "than", "as",
    // auxiliaries and modals
    "is", "am", "are", "was", "were", "be", "been", "being", "has", "have", "had", "do", "does", "did",
    "will", "would", "can", "could", "shall", "should", "may", "might", "must",
    // adverbs and fillers
    "not", "never", "very", "too", "also", "just", "there", "here", "again", "still", "now", "soon",
];

const PRONOUNS: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "us", "them", "her", "himself", "herself",
    "itself", "themselves", "someone", "something", "everyone", "everything", "nobody", "nothing",
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Content,
    Pronoun,
    Break,
}

fn role(tokens: &[String], i: usize) -> Role {
    let t = tokens[i].to_lowercase();
    if !is_word(&t) {
        return Role::Break;
    }
    if t == "her" {
        // determiner when a content word follows
        let next_is_content = tokens.get(i + 1).is_some_and(|n| {
            let n = n.to_lowercase();
            is_word(&n) && !FUNCTION_WORDS.contains(&n.as_str()) && !PRONOUNS.contains(&n.as_str())
        });
        return if next_is_content { Role::Break } else { Role::Pronoun };
    }
    if PRONOUNS.contains(&t.as_str()) {
        return Role::Pronoun;
    }
    if FUNCTION_WORDS.contains(&t.as_str()) || (t.len() > 3 && t.ends_with("ly")) {
        return Role::Break;
    }
    Role::Content
}

/// Head (last token) of the first noun-phrase run in `range`.
fn first_head(tokens: &[String], range: std::ops::Range<usize>) -> Option<&str> {
    let mut head: Option<usize> = None;
    for i in range {
        match role(tokens, i) {
            Role::Pronoun if head.is_none() => return Some(&tokens[i]),
            Role::Content => head = Some(i),
            _ if head.is_some() => break,
            _ => {}
        }
    }
    head.map(|i| tokens[i].as_str())
}

/// Subject-verb-object triples from an annotated sentence. The relation is
/// the matched verb's lemma; subject and object are the heads of the first
/// noun phrases before and after the verb. Incomplete patterns yield nothing.
pub fn extract_triples(sentence: &Sentence) -> Vec<Triple> {
    let Some(verb) = &sentence.verb else { return Vec::new() };
    let toks = &sentence.tokens;
    let subject = first_head(toks, 0..verb.position);
    let object = first_head(toks, verb.position + 1..toks.len());
    match (subject, object) {
        (Some(s), Some(o)) => Triple::new(s, &verb.lemma, o).into_iter().collect(),
        _ => Vec::new(),
    }
}

/// Parse triple TSV (`subject, relation, object, sentence-index`), grouped
/// by sentence index. Blank lines and `#` comments are skipped.
pub fn parse_triples(text: &str) -> Result<BTreeMap<usize, Vec<Triple>>, KgError> {
    let mut groups: BTreeMap<usize, Vec<Triple>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(KgError::Malformed { row, reason: format!("expected 4 columns, found {}", cols.len()) });
        }
        let idx: usize = cols[3]
            .trim()
            .parse()
            .map_err(|_| KgError::Malformed { row, reason: format!("bad sentence index '{}'", cols[3]) })?;
        let triple = Triple::new(cols[0], cols[1], cols[2])
            .ok_or_else(|| KgError::Malformed { row, reason: "empty triple component".into() })?;
        groups.entry(idx).or_default().push(triple);
    }
    Ok(groups)
}

pub fn import_triples(path: impl AsRef<Path>) -> Result<BTreeMap<usize, Vec<Triple>>, KgError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| KgError::Io { path: path.display().to_string(), source })?;
    parse_triples(&text)
}
