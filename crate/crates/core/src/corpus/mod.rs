//! Story corpora: ingestion, splitting, sentence segmentation and verb-class
//! annotation.

mod lemma;
mod tokenize;

pub use lemma::lemma_candidates;
pub use tokenize::{detokenize, is_terminator, is_word, split_sentences, tokenize};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("empty corpus")]
    Empty,
    #[error("unknown corpus format '{0}' (expected 'lines' or 'blocks')")]
    UnknownFormat(String),
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("lemma '{lemma}' maps to conflicting classes '{first}' and '{second}' (line {line})")]
    ConflictingLemma {
        lemma: String,
        first: String,
        second: String,
        line: usize,
    },
}

/// A verb-class identifier such as `discover-84`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VerbClass(String);

impl VerbClass {
    pub fn new(id: impl Into<String>) -> Self {
        VerbClass(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VerbClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VerbClass {
    fn from(s: &str) -> Self {
        VerbClass(s.to_string())
    }
}

/// The verb that determined a sentence's class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbMatch {
    /// Token index of the verb within the sentence.
    pub position: usize,
    pub lemma: String,
    pub class: VerbClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
    pub verb: Option<VerbMatch>,
}

impl Sentence {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence { text, tokens, verb: None }
    }

    /// Build from an existing token sequence; the text is the detokenized form.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Sentence { text: detokenize(&tokens), tokens, verb: None }
    }

    pub fn verb_class(&self) -> Option<&VerbClass> {
        self.verb.as_ref().map(|v| &v.class)
    }
}

/// Lemma -> verb-class map. Lookups are case-insensitive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerbClassIndex {
    map: BTreeMap<String, VerbClass>,
}

impl VerbClassIndex {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn class_of_lemma(&self, lemma: &str) -> Option<&VerbClass> {
        self.map.get(&lemma.to_lowercase())
    }

    /// Resolve an inflected word to `(lemma, class)` using the first
    /// lemmatizer candidate present in the index.
    pub fn lookup(&self, word: &str) -> Option<(String, &VerbClass)> {
        if !is_word(word) {
            return None;
        }
        lemma_candidates(word)
            .into_iter()
            .find_map(|cand| self.map.get(&cand).map(|class| (cand, class)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &VerbClass)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn lemmas_of(&self, class: &VerbClass) -> Vec<&str> {
        self.map.iter().filter(|(_, c)| *c == class).map(|(l, _)| l.as_str()).collect()
    }

    /// Parse the `lemma<TAB>class-id` format; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut map: BTreeMap<String, (VerbClass, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() != 2 || cols[0].is_empty() || cols[1].is_empty() {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    reason: "expected 'lemma<TAB>class-id'".into(),
                });
            }
            let lemma = cols[0].to_lowercase();
            let class = VerbClass::new(cols[1]);
            if let Some((existing, _)) = map.get(&lemma) {
                if *existing != class {
                    return Err(CorpusError::ConflictingLemma {
                        lemma,
                        first: existing.to_string(),
                        second: class.to_string(),
                        line: line_no,
                    });
                }
                continue;
            }
            map.insert(lemma, (class, line_no));
        }
        Ok(VerbClassIndex { map: map.into_iter().map(|(k, (c, _))| (k, c)).collect() })
    }
}

impl FromIterator<(String, VerbClass)> for VerbClassIndex {
    fn from_iter<I: IntoIterator<Item = (String, VerbClass)>>(iter: I) -> Self {
        VerbClassIndex {
            map: iter.into_iter().map(|(l, c)| (l.to_lowercase(), c)).collect(),
        }
    }
}

pub fn load_verbnet_index(path: impl AsRef<Path>) -> Result<VerbClassIndex, CorpusError> {
    let text = read_utf8(path.as_ref())?;
    VerbClassIndex::parse(&text)
}

/// Set the sentence's verb to the first token (left to right) whose lemma is
/// in the index. Recomputed from scratch, so applying it twice is the same as
/// once.
pub fn annotate_verb_class(sentence: &Sentence, index: &VerbClassIndex) -> Sentence {
    let verb = sentence.tokens.iter().enumerate().find_map(|(position, tok)| {
        index.lookup(tok).map(|(lemma, class)| VerbMatch {
            position,
            lemma,
            class: class.clone(),
        })
    });
    Sentence { verb, ..sentence.clone() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl Story {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Sentence indices per verb class, in story order.
    pub fn class_positions(&self) -> BTreeMap<&VerbClass, Vec<usize>> {
        let mut out: BTreeMap<&VerbClass, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if let Some(c) = s.verb_class() {
                out.entry(c).or_default().push(i);
            }
        }
        out
    }
}

/// Story-level verb-class statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub story_count: usize,
    pub sentence_count: usize,
    /// Number of stories containing each class.
    pub stories_with_class: BTreeMap<VerbClass, usize>,
    /// Number of sentences carrying each class.
    pub sentences_with_class: BTreeMap<VerbClass, usize>,
    /// Number of stories containing both classes, keyed with the smaller
    /// class first. The diagonal equals `stories_with_class`.
    pub cooccurrence: BTreeMap<(VerbClass, VerbClass), usize>,
}

impl CorpusStats {
    pub fn compute(stories: &[Story]) -> Self {
        let mut stats = CorpusStats {
            story_count: stories.len(),
            ..Default::default()
        };
        for story in stories {
            stats.sentence_count += story.sentences.len();
            let mut present: BTreeSet<&VerbClass> = BTreeSet::new();
            for s in &story.sentences {
                if let Some(c) = s.verb_class() {
                    *stats.sentences_with_class.entry(c.clone()).or_default() += 1;
                    present.insert(c);
                }
            }
            let present: Vec<&VerbClass> = present.into_iter().collect();
            for (i, a) in present.iter().enumerate() {
                *stats.stories_with_class.entry((*a).clone()).or_default() += 1;
                for b in &present[i..] {
                    *stats.cooccurrence.entry(((*a).clone(), (*b).clone())).or_default() += 1;
                }
            }
        }
        stats
    }

    /// `|verbs|`: the number of distinct verb classes observed.
    pub fn distinct_classes(&self) -> usize {
        self.stories_with_class.len()
    }

    /// `count(v)`: stories containing `v`.
    pub fn count(&self, v: &VerbClass) -> usize {
        self.stories_with_class.get(v).copied().unwrap_or(0)
    }

    /// `count(v, g)`: stories containing both `v` and `g`.
    pub fn count_both(&self, v: &VerbClass, g: &VerbClass) -> usize {
        let key = if v <= g { (v.clone(), g.clone()) } else { (g.clone(), v.clone()) };
        self.cooccurrence.get(&key).copied().unwrap_or(0)
    }

    pub fn classes(&self) -> impl Iterator<Item = &VerbClass> {
        self.stories_with_class.keys()
    }
}

/// A list of stories with statistics kept in sync; immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    stories: Vec<Story>,
    stats: CorpusStats,
}

impl Corpus {
    pub fn new(stories: Vec<Story>) -> Self {
        let stats = CorpusStats::compute(&stories);
        Corpus { stories, stats }
    }

    pub fn stories(&self) -> &[Story] {
        &self.stories
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.stories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stories.is_empty()
    }

    /// Re-annotate every sentence against `index`.
    pub fn annotated(&self, index: &VerbClassIndex) -> Corpus {
        let stories = self
            .stories
            .iter()
            .map(|s| Story {
                id: s.id.clone(),
                sentences: s.sentences.iter().map(|x| annotate_verb_class(x, index)).collect(),
            })
            .collect();
        Corpus::new(stories)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.stories.iter().flat_map(|s| s.sentences.iter())
    }

    /// First sentence of every story, in corpus order.
    pub fn seeds(&self) -> Vec<Sentence> {
        self.stories.iter().filter_map(|s| s.sentences.first().cloned()).collect()
    }

    /// Serialize in the `blocks` format with `# id:` headers, so that story
    /// identifiers survive a round trip.
    pub fn to_blocks(&self) -> String {
        let mut out = String::new();
        for (i, story) in self.stories.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str("# id: ");
            out.push_str(&story.id);
            out.push('\n');
            for s in &story.sentences {
                out.push_str(&s.text);
                out.push('\n');
            }
        }
        out
    }
}

/// On-disk corpus layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One story per line; sentences delimited inline by terminators.
    Lines,
    /// Stories separated by blank lines, one sentence per line. Lines starting
    /// with `#` are comments; `# id: X` names the following story.
    Blocks,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lines" => Ok(CorpusFormat::Lines),
            "blocks" => Ok(CorpusFormat::Blocks),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

fn read_utf8(path: &Path) -> Result<String, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|e| {
        let valid = e.utf8_error().valid_up_to();
        let line = e.as_bytes()[..valid].iter().filter(|&&b| b == b'\n').count() + 1;
        CorpusError::Malformed { line, reason: "invalid UTF-8".into() }
    })
}

fn check_record(text: &str, line: usize) -> Result<(), CorpusError> {
    if text.chars().any(|c| c.is_control() && c != '\t') {
        return Err(CorpusError::Malformed { line, reason: "control character".into() });
    }
    if !tokenize(text).iter().any(|t| is_word(t)) {
        return Err(CorpusError::Malformed { line, reason: "no word tokens".into() });
    }
    Ok(())
}

/// Parse corpus text. Sentences are left unannotated; see
/// [`Corpus::annotated`].
pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut stories = Vec::new();
    match format {
        CorpusFormat::Lines => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                check_record(line, i + 1)?;
                let sentences = split_sentences(line).into_iter().map(Sentence::new).collect();
                stories.push(Story { id: format!("story-{:05}", stories.len()), sentences });
            }
        }
        CorpusFormat::Blocks => {
            let mut current: Vec<Sentence> = Vec::new();
            let mut pending_id: Option<String> = None;
            let flush = |current: &mut Vec<Sentence>, id: &mut Option<String>, stories: &mut Vec<Story>| {
                if !current.is_empty() {
                    let id = id.take().unwrap_or_else(|| format!("story-{:05}", stories.len()));
                    stories.push(Story { id, sentences: std::mem::take(current) });
                }
            };
            for (i, line) in text.lines().enumerate() {
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    flush(&mut current, &mut pending_id, &mut stories);
                    continue;
                }
                if let Some(comment) = trimmed.strip_prefix('#') {
                    if let Some(id) = comment.trim().strip_prefix("id:") {
                        flush(&mut current, &mut pending_id, &mut stories);
                        pending_id = Some(id.trim().to_string());
                    }
                    continue;
                }
                check_record(trimmed, i + 1)?;
                current.push(Sentence::new(trimmed));
            }
            flush(&mut current, &mut pending_id, &mut stories);
        }
    }
    if stories.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(Corpus::new(stories))
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let text = read_utf8(path.as_ref())?;
    parse_corpus(&text, format)
}

/// Seeded random partition into `round(n * train_fraction)` training stories
/// and the remainder. Each side keeps source order.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let n = corpus.len();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    if train_idx.is_empty() || test_idx.is_empty() {
        log::warn!("degenerate split of {n} stories: {} train / {} test", train_idx.len(), test_idx.len());
    }
    let pick = |idx: &[usize]| Corpus::new(idx.iter().map(|&i| corpus.stories[i].clone()).collect());
    Ok((pick(&train_idx), pick(&test_idx)))
}
