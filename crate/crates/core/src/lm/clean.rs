use serde::{Deserialize, Serialize};

use super::RawContinuation;
use crate::corpus::{annotate_verb_class, detokenize, is_terminator, Sentence, VerbClass, VerbClassIndex, VerbMatch};

pub const DEFAULT_MAX_TOKENS: usize = 20;

/// A cleaned continuation: one sentence that carries an indexed verb.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    /// Position of the source continuation in the raw batch.
    pub index: usize,
    pub text: String,
    pub tokens: Vec<String>,
    pub verb: VerbMatch,
}

impl Candidate {
    pub fn verb_class(&self) -> &VerbClass {
        &self.verb.class
    }

    pub fn to_sentence(&self) -> Sentence {
        Sentence { text: self.text.clone(), tokens: self.tokens.clone(), verb: Some(self.verb.clone()) }
    }

    /// Wrap an annotated sentence; `None` when it has no verb class.
    pub fn from_sentence(index: usize, sentence: &Sentence) -> Option<Self> {
        Some(Candidate {
            index,
            text: sentence.text.clone(),
            tokens: sentence.tokens.clone(),
            verb: sentence.verb.clone()?,
        })
    }
}

/// Truncate each continuation at its first sentence terminator or at
/// `max_tokens`, whichever comes first, and keep only those with an indexed
/// verb. Order is preserved.
pub fn clean_candidates(raw: &[RawContinuation], index: &VerbClassIndex, max_tokens: usize) -> Vec<Candidate> {
    raw.iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let end = r
                .tokens
                .iter()
                .position(|t| is_terminator(t))
                .map_or(r.tokens.len(), |p| p + 1)
                .min(max_tokens);
            let tokens = r.tokens[..end].to_vec();
            let sentence = Sentence { text: detokenize(&tokens), tokens, verb: None };
            Candidate::from_sentence(i, &annotate_verb_class(&sentence, index))
        })
        .collect()
}
