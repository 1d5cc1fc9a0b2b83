//! Proposal language models: the built-in n-gram model, a remote client, and
//! the candidate sampling/cleaning shared by every policy.

mod clean;
mod ngram;
mod remote;

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::seed::SeededRng;

pub use clean::{clean_candidates, Candidate, DEFAULT_MAX_TOKENS};
pub use ngram::{train_ngram, NgramConfig, NgramModel};
pub use remote::{remote_generate, GenerateRequest, RemoteConfig, RemoteError, RemoteModel};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("count and top_k must both be at least 1")]
    BadSamplingParams,
    #[error("perplexity of an empty text is undefined")]
    EmptyText,
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Token vocabulary. Ids 0..3 are reserved for `<s>`, `</s>` and `<unk>`;
/// the remaining tokens are assigned in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    folded: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = tokens.into_iter().map(|s| s.as_ref().to_string()).collect();
        words.sort();
        words.dedup();
        let mut all = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(words.into_iter().filter(|w| ![BOS_TOKEN, EOS_TOKEN, UNK_TOKEN].contains(&w.as_str())));
        Self::from_list(all)
    }

    /// Rebuild from a full id-ordered token list (as stored in checkpoints).
    pub fn from_list(tokens: Vec<String>) -> Self {
        let ids: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut folded = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            folded.entry(t.to_lowercase()).or_insert(i as u32);
        }
        Vocab { tokens, ids, folded }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    /// Exact match first, then the first token equal ignoring case.
    pub fn id_folded(&self, token: &str) -> u32 {
        self.ids
            .get(token)
            .or_else(|| self.folded.get(&token.to_lowercase()))
            .copied()
            .unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Parameters for sampling continuations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub top_k: usize,
    /// Hard cap on generated tokens per continuation.
    pub max_tokens: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { top_k: 1000, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

/// One uncleaned continuation as produced by a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawContinuation {
    pub tokens: Vec<String>,
}

impl RawContinuation {
    pub fn from_text(text: &str) -> Self {
        RawContinuation { tokens: crate::corpus::tokenize(text) }
    }
}

/// A frozen model that proposes continuations and embeds tokens.
pub trait ProposalModel {
    fn embedding_dim(&self) -> usize;
    fn token_embedding(&self, token: &str) -> &[f64];
    fn generate(
        &self,
        prompt: &[String],
        count: usize,
        params: &SamplingParams,
        rng: &mut SeededRng,
    ) -> Result<Vec<RawContinuation>, LmError>;
    /// Natural-log probability of `tokens` from the start of a text; `None`
    /// when the model cannot score sequences.
    fn sequence_logprob(&self, tokens: &[String]) -> Option<f64>;
}

/// A model with explicit next-token distributions over a fixed vocabulary.
pub trait ConditionalModel {
    fn vocab(&self) -> &Vocab;
    fn order(&self) -> usize;
    /// Distribution over every vocabulary id given the previous `order − 1`
    /// ids (left-padded with `<s>`).
    fn next_distribution(&self, context: &[u32]) -> Vec<f64>;

    fn context_of(&self, history: &[u32]) -> Vec<u32> {
        let n = self.order().saturating_sub(1);
        let mut ctx = vec![BOS; n.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        ctx
    }
}

/// Mean token embedding of `tokens`; the zero vector when empty.
pub fn mean_embedding<M: ProposalModel + ?Sized>(model: &M, tokens: &[String]) -> Vec<f64> {
    let mut out = vec![0.0; model.embedding_dim()];
    if tokens.is_empty() {
        return out;
    }
    for t in tokens {
        crate::nn::axpy(&mut out, 1.0, model.token_embedding(t));
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Draw from the `top_k` most probable entries of `dist`, renormalized.
/// Ties in probability are ordered by lower id.
pub fn sample_top_k(dist: &[f64], top_k: usize, rng: &mut SeededRng) -> u32 {
    let mut ranked: Vec<(u32, f64)> = dist
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (i as u32, p))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k.max(1));
    if ranked.len() == 1 {
        return ranked[0].0;
    }
    let total: f64 = ranked.iter().map(|r| r.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(id, p) in &ranked {
        if u < p {
            return id;
        }
        u -= p;
    }
    ranked.last().map_or(EOS, |r| r.0)
}

/// Sample `count` continuations of `prompt`. Each continuation stops after a
/// sentence terminator (kept), at `</s>` (dropped), or at `max_tokens`.
pub fn sample_continuations<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[String],
    count: usize,
    params: &SamplingParams,
    rng: &mut SeededRng,
) -> Result<Vec<RawContinuation>, LmError> {
    if count == 0 || params.top_k == 0 {
        return Err(LmError::BadSamplingParams);
    }
    let vocab = model.vocab();
    let prompt_ids: Vec<u32> = prompt.iter().map(|t| vocab.id(t)).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut history = prompt_ids.clone();
        let mut tokens = Vec::new();
        while tokens.len() < params.max_tokens {
            let dist = model.next_distribution(&model.context_of(&history));
            let id = sample_top_k(&dist, params.top_k, rng);
            if id == EOS {
                break;
            }
            let tok = vocab.token(id).to_string();
            let stop = crate::corpus::is_terminator(&tok);
            tokens.push(tok);
            history.push(id);
            if stop {
                break;
            }
        }
        out.push(RawContinuation { tokens });
    }
    Ok(out)
}

/// `Σ ln P(tok_i | preceding tokens)` with the text starting after `<s>`.
pub fn conditional_logprob<M: ConditionalModel + ?Sized>(model: &M, tokens: &[String]) -> f64 {
    let ids: Vec<u32> = tokens.iter().map(|t| model.vocab().id(t)).collect();
    let mut total = 0.0;
    for i in 0..ids.len() {
        let dist = model.next_distribution(&model.context_of(&ids[..i]));
        total += dist[ids[i] as usize].ln();
    }
    total
}

/// `exp(−(1/N) Σ ln P(tok_i | context))`.
pub fn perplexity<M: ProposalModel + ?Sized>(model: &M, text: &[String]) -> Result<Option<f64>, LmError> {
    if text.is_empty() {
        return Err(LmError::EmptyText);
    }
    Ok(model.sequence_logprob(text).map(|lp| (-lp / text.len() as f64).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    struct Fixed {
        vocab: Vocab,
        dist: Vec<f64>,
    }

    impl ConditionalModel for Fixed {
        fn vocab(&self) -> &Vocab {
            &self.vocab
        }
        fn order(&self) -> usize {
            1
        }
        fn next_distribution(&self, _: &[u32]) -> Vec<f64> {
            self.dist.clone()
        }
    }

    #[test]
    fn vocab_reserves_specials() {
        let v = Vocab::from_tokens(["b", "a", "b", "The"]);
        assert_eq!(v.tokens(), &["<s>", "</s>", "<unk>", "The", "a", "b"]);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.id_folded("the"), 3);
    }

    #[test]
    fn context_padding() {
        let m = Fixed { vocab: Vocab::from_tokens(["a"]), dist: vec![] };
        struct O3<'a>(&'a Fixed);
        impl ConditionalModel for O3<'_> {
            fn vocab(&self) -> &Vocab {
                self.0.vocab()
            }
            fn order(&self) -> usize {
                3
            }
            fn next_distribution(&self, _: &[u32]) -> Vec<f64> {
                vec![]
            }
        }
        assert_eq!(O3(&m).context_of(&[]), vec![BOS, BOS]);
        assert_eq!(O3(&m).context_of(&[7]), vec![BOS, 7]);
        assert_eq!(O3(&m).context_of(&[5, 6, 7]), vec![6, 7]);
        assert!(m.context_of(&[5]).is_empty());
    }

    #[test]
    fn top_k_one_is_greedy() {
        let dist = vec![0.0, 0.1, 0.0, 0.5, 0.4];
        for seed in 0..20 {
            assert_eq!(sample_top_k(&dist, 1, &mut rng_from_seed(seed)), 3);
        }
        let tie = vec![0.0, 0.0, 0.0, 0.5, 0.5];
        assert_eq!(sample_top_k(&tie, 1, &mut rng_from_seed(1)), 3);
    }

    #[test]
    fn top_k_support() {
        let dist = vec![0.0, 0.05, 0.0, 0.3, 0.25, 0.2, 0.2];
        let mut rng = rng_from_seed(3);
        for _ in 0..500 {
            let id = sample_top_k(&dist, 2, &mut rng);
            assert!(id == 3 || id == 4);
        }
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let vocab = Vocab::from_tokens(["a", "b", "c", "d"]);
        let dist = vec![0.25; 7];
        let m = Fixed { vocab, dist };
        let text: Vec<String> = ["a", "d", "c"].iter().map(|s| s.to_string()).collect();
        let lp = conditional_logprob(&m, &text);
        assert!(((-lp / 3.0).exp() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn continuation_stops_at_terminator() {
        let vocab = Vocab::from_tokens(["."]);
        let mut dist = vec![0.0; vocab.len()];
        dist[vocab.id(".") as usize] = 1.0;
        let m = Fixed { vocab, dist };
        let out = sample_continuations(&m, &[], 3, &SamplingParams::default(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|c| c.tokens == vec!["."]));
        assert!(matches!(
            sample_continuations(&m, &[], 0, &SamplingParams::default(), &mut rng_from_seed(0)),
            Err(LmError::BadSamplingParams)
        ));
    }
}
