use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    conditional_logprob, sample_continuations, ConditionalModel, LmError, ProposalModel, RawContinuation,
    SamplingParams, Vocab, BOS, EOS,
};
use crate::checkpoint::{CheckpointError, Container, TensorData};
use crate::corpus::Corpus;
use crate::nn::random_normal_vec;
use crate::seed::{rng_for, SeededRng};

const KIND: &str = "ngram";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgramConfig {
    pub order: usize,
    /// Add-λ smoothing mass per vocabulary entry.
    pub lambda: f64,
    pub embedding_dim: usize,
    /// Seed for the embedding table.
    pub seed: u64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig { order: 3, lambda: 0.01, embedding_dim: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    total: u64,
    next: Vec<(u32, u64)>,
}

/// Word n-gram model with add-λ smoothing and backoff to the longest
/// observed context.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    config: NgramConfig,
    vocab: Vocab,
    /// `tables[m]` maps an m-token context to its successor counts.
    tables: Vec<HashMap<Vec<u32>, ContextCounts>>,
    embeddings: Vec<f64>,
}

pub fn train_ngram(corpus: &Corpus, config: &NgramConfig) -> Result<NgramModel, LmError> {
    if config.order == 0 {
        return Err(LmError::ZeroOrder);
    }
    let texts: Vec<Vec<&String>> = corpus
        .stories()
        .iter()
        .map(|s| s.sentences.iter().flat_map(|x| x.tokens.iter()).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect();
    if texts.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let vocab = Vocab::from_tokens(texts.iter().flatten());
    let mut raw: Vec<BTreeMap<Vec<u32>, BTreeMap<u32, u64>>> = vec![BTreeMap::new(); config.order];
    for text in &texts {
        let mut ids: Vec<u32> = vec![BOS; config.order - 1];
        ids.extend(text.iter().map(|t| vocab.id(t)));
        ids.push(EOS);
        for i in config.order - 1..ids.len() {
            for (m, table) in raw.iter_mut().enumerate() {
                let ctx = ids[i - m..i].to_vec();
                *table.entry(ctx).or_default().entry(ids[i]).or_insert(0) += 1;
            }
        }
    }
    let tables = raw
        .into_iter()
        .map(|t| {
            t.into_iter()
                .map(|(ctx, next)| {
                    let total = next.values().sum();
                    (ctx, ContextCounts { total, next: next.into_iter().collect() })
                })
                .collect()
        })
        .collect();
    let embeddings = init_embeddings(vocab.len(), config);
    Ok(NgramModel { config: *config, vocab, tables, embeddings })
}

fn init_embeddings(vocab_len: usize, config: &NgramConfig) -> Vec<f64> {
    let mut rng = rng_for(config.seed, "lm/embeddings");
    let scale = 1.0 / (config.embedding_dim as f64).sqrt();
    random_normal_vec(vocab_len * config.embedding_dim, scale, &mut rng)
        .into_iter()
        .map(|x| x as f32 as f64)
        .collect()
}

impl NgramModel {
    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    /// Number of tokens with non-zero probability (everything but `<s>`).
    fn predictive_size(&self) -> usize {
        self.vocab.len() - 1
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND);
        c.text(
            "config",
            format!(
                "order={}\nlambda={}\nembedding_dim={}\nseed={}",
                self.config.order, self.config.lambda, self.config.embedding_dim, self.config.seed
            ),
        );
        c.text("vocab", self.vocab.tokens().join("\n"));
        for (m, table) in self.tables.iter().enumerate() {
            let mut rows: Vec<(&Vec<u32>, &ContextCounts)> = table.iter().collect();
            rows.sort_by(|a, b| a.0.cmp(b.0));
            let mut ids = Vec::new();
            let mut freqs = Vec::new();
            for (ctx, cc) in rows {
                for &(next, f) in &cc.next {
                    ids.extend_from_slice(ctx);
                    ids.push(next);
                    freqs.push(f);
                }
            }
            let n = freqs.len() as u64;
            c.push(format!("ngrams{m}"), vec![n, m as u64 + 1], TensorData::U32(ids));
            c.push(format!("freqs{m}"), vec![n], TensorData::U64(freqs));
        }
        c.push(
            "embedding",
            vec![self.vocab.len() as u64, self.config.embedding_dim as u64],
            TensorData::F32(self.embeddings.iter().map(|&x| x as f32).collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, LmError> {
        c.expect_kind(KIND)?;
        let bad = |reason: &str| CheckpointError::BadSection { name: "config".into(), reason: reason.into() };
        let mut config = NgramConfig::default();
        for line in c.get_text("config")?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k {
                "order" => config.order = v.parse().map_err(|_| bad("order"))?,
                "lambda" => config.lambda = v.parse().map_err(|_| bad("lambda"))?,
                "embedding_dim" => config.embedding_dim = v.parse().map_err(|_| bad("embedding_dim"))?,
                "seed" => config.seed = v.parse().map_err(|_| bad("seed"))?,
                _ => return Err(bad("unknown key").into()),
            }
        }
        let vocab = Vocab::from_list(c.get_text("vocab")?.split('\n').map(String::from).collect());
        let mut tables = Vec::with_capacity(config.order);
        for m in 0..config.order {
            let (_, ids) = c.get_u32(&format!("ngrams{m}"))?;
            let (_, freqs) = c.get_u64(&format!("freqs{m}"))?;
            if ids.len() != freqs.len() * (m + 1) {
                return Err(CheckpointError::BadSection { name: format!("ngrams{m}"), reason: "size mismatch".into() }.into());
            }
            let mut table: HashMap<Vec<u32>, ContextCounts> = HashMap::new();
            for (row, &f) in ids.chunks_exact(m + 1).zip(freqs) {
                let e = table
                    .entry(row[..m].to_vec())
                    .or_insert_with(|| ContextCounts { total: 0, next: Vec::new() });
                e.total += f;
                e.next.push((row[m], f));
            }
            tables.push(table);
        }
        let (shape, emb) = c.get_f32("embedding")?;
        if shape != [vocab.len() as u64, config.embedding_dim as u64] {
            return Err(CheckpointError::BadSection { name: "embedding".into(), reason: "shape mismatch".into() }.into());
        }
        let embeddings = emb.iter().map(|&x| x as f64).collect();
        Ok(NgramModel { config, vocab, tables, embeddings })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        Self::from_container(&Container::load(path)?)
    }

    /// SHA-256 of the encoded checkpoint.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_container().encode()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl ConditionalModel for NgramModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn order(&self) -> usize {
        self.config.order
    }

    fn next_distribution(&self, context: &[u32]) -> Vec<f64> {
        let v = self.vocab.len();
        let lambda = self.config.lambda;
        let longest = context.len().min(self.config.order - 1);
        for m in (0..=longest).rev() {
            let ctx = &context[context.len() - m..];
            let Some(cc) = self.tables[m].get(ctx) else { continue };
            if cc.total == 0 {
                continue;
            }
            let z = cc.total as f64 + lambda * self.predictive_size() as f64;
            let mut dist = vec![lambda / z; v];
            dist[BOS as usize] = 0.0;
            for &(id, f) in &cc.next {
                dist[id as usize] += f as f64 / z;
            }
            return dist;
        }
        // Unreachable for a trained model: the empty context always has counts.
        let mut dist = vec![1.0 / self.predictive_size() as f64; v];
        dist[BOS as usize] = 0.0;
        dist
    }
}

impl ProposalModel for NgramModel {
    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn token_embedding(&self, token: &str) -> &[f64] {
        let d = self.config.embedding_dim;
        let id = self.vocab.id_folded(token) as usize;
        &self.embeddings[id * d..(id + 1) * d]
    }

    fn generate(
        &self,
        prompt: &[String],
        count: usize,
        params: &SamplingParams,
        rng: &mut SeededRng,
    ) -> Result<Vec<RawContinuation>, LmError> {
        sample_continuations(self, prompt, count, params, rng)
    }

    fn sequence_logprob(&self, tokens: &[String]) -> Option<f64> {
        Some(conditional_logprob(self, tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, CorpusFormat};
    use crate::lm::perplexity;
    use crate::seed::rng_from_seed;

    fn corpus(text: &str) -> Corpus {
        parse_corpus(text, CorpusFormat::Lines).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bigram_hand_count() {
        let cfg = NgramConfig { order: 2, lambda: 0.0, ..Default::default() };
        let m = train_ngram(&corpus("a b a b"), &cfg).unwrap();
        let a = m.vocab().id("a");
        let b = m.vocab().id("b");
        assert_eq!(m.next_distribution(&[a])[b as usize], 1.0);
        // after "b": one "a", one "</s>"
        let d = m.next_distribution(&[b]);
        assert_eq!(d[a as usize], 0.5);
        assert_eq!(d[EOS as usize], 0.5);
    }

    #[test]
    fn unigram_matches_frequencies() {
        let cfg = NgramConfig { order: 1, lambda: 0.0, ..Default::default() };
        let m = train_ngram(&corpus("x x y"), &cfg).unwrap();
        let d = m.next_distribution(&[]);
        assert_eq!(d[m.vocab().id("x") as usize], 0.5);
        assert_eq!(d[m.vocab().id("y") as usize], 0.25);
        assert_eq!(d[EOS as usize], 0.25);
    }

    #[test]
    fn errors() {
        let cfg = NgramConfig { order: 0, ..Default::default() };
        assert!(matches!(train_ngram(&corpus("a"), &cfg), Err(LmError::ZeroOrder)));
        assert!(matches!(train_ngram(&Corpus::new(vec![]), &NgramConfig::default()), Err(LmError::EmptyCorpus)));
    }

    #[test]
    fn smoothed_distribution_normalized_with_backoff() {
        let m = train_ngram(&corpus("the cat sat .\nthe dog ran ."), &NgramConfig::default()).unwrap();
        for ctx in [vec![BOS, BOS], vec![BOS, m.vocab().id("the")], vec![m.vocab().id("dog"), m.vocab().id("cat")]] {
            let d = m.next_distribution(&ctx);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(d[BOS as usize], 0.0);
        }
    }

    #[test]
    fn deterministic_model_has_unit_perplexity() {
        let cfg = NgramConfig { order: 3, lambda: 0.0, ..Default::default() };
        let m = train_ngram(&corpus("a b c d"), &cfg).unwrap();
        let p = perplexity(&m, &toks("a b c d")).unwrap().unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_way_choice_perplexity() {
        let cfg = NgramConfig { order: 1, lambda: 0.0, ..Default::default() };
        // unigram over {a, </s>} with P = 0.5 each
        let m = train_ngram(&corpus("a"), &cfg).unwrap();
        let p = perplexity(&m, &toks("a a a")).unwrap().unwrap();
        assert!((p - 2.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = train_ngram(&corpus("the cat sat .\nthe dog ran ."), &NgramConfig { embedding_dim: 8, ..Default::default() }).unwrap();
        let back = NgramModel::from_container(&Container::decode(&m.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }

    #[test]
    fn seeded_generation_repeats() {
        let m = train_ngram(&corpus("the cat sat .\nthe dog ran .\na cat ran ."), &NgramConfig::default()).unwrap();
        let p = SamplingParams { top_k: 10, max_tokens: 20 };
        let a = m.generate(&toks("the"), 5, &p, &mut rng_from_seed(4)).unwrap();
        let b = m.generate(&toks("the"), 5, &p, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.token_embedding("The"), m.token_embedding("the"));
        assert_eq!(m.token_embedding("nope").len(), m.embedding_dim());
    }
}
