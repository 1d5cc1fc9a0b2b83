#![allow(dead_code)]

use std::collections::HashMap;

use goalweaver::corpus::{Corpus, Sentence, Story, VerbClass, VerbMatch};
use goalweaver::lm::{Candidate, LmError, ProposalModel, RawContinuation, SamplingParams};
use goalweaver::seed::SeededRng;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const POOL: [&str; 6] = ["a-1", "b-2", "c-3", "d-4", "e-5", "f-6"];

pub fn annotated(text: &str, class: Option<&str>) -> Sentence {
    let mut s = Sentence::new(text);
    s.verb = class.map(|c| VerbMatch { position: 0, lemma: "x".into(), class: VerbClass::new(c) });
    s
}

pub fn random_corpus(rng: &mut SeededRng) -> Corpus {
    let n = rng.random_range(1..=20);
    let stories = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=10);
            let sentences = (0..len)
                .map(|j| {
                    let class = if rng.random_bool(0.2) { None } else { POOL.choose(rng).copied() };
                    annotated(&format!("line {j} ."), class)
                })
                .collect();
            Story { id: format!("s{i}"), sentences }
        })
        .collect();
    Corpus::new(stories)
}

/// Fixed random embeddings keyed by token.
pub struct TableEmbedder {
    pub dim: usize,
    table: HashMap<String, Vec<f64>>,
    zero: Vec<f64>,
}

impl TableEmbedder {
    pub fn random(tokens: &[&str], dim: usize, rng: &mut SeededRng) -> Self {
        let table = tokens
            .iter()
            .map(|t| (t.to_string(), (0..dim).map(|_| StandardNormal.sample(rng)).collect()))
            .collect();
        TableEmbedder { dim, table, zero: vec![0.0; dim] }
    }

    pub fn one_hot(tokens: &[&str]) -> Self {
        let dim = tokens.len();
        let table = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                (t.to_string(), v)
            })
            .collect();
        TableEmbedder { dim, table, zero: vec![0.0; dim] }
    }
}

impl ProposalModel for TableEmbedder {
    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn token_embedding(&self, token: &str) -> &[f64] {
        self.table.get(token).unwrap_or(&self.zero)
    }

    fn generate(
        &self,
        _prompt: &[String],
        _count: usize,
        _params: &SamplingParams,
        _rng: &mut SeededRng,
    ) -> Result<Vec<RawContinuation>, LmError> {
        Ok(Vec::new())
    }

    fn sequence_logprob(&self, _tokens: &[String]) -> Option<f64> {
        None
    }
}

pub fn candidate(tokens: &[&str], class: &str) -> Candidate {
    Candidate {
        index: 0,
        text: tokens.join(" "),
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        verb: VerbMatch { position: 0, lemma: tokens[0].into(), class: VerbClass::new(class) },
    }
}

