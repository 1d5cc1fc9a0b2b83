//! Reward-shaped fine-tuning of the n-gram proposal model.
//!
//! The tuned model keeps a log-probability vector for every context it has
//! been updated on and defers to the frozen reference everywhere else.
//! Updates are likelihood-ratio policy-gradient steps on shaped reward with a
//! KL penalty toward the reference and an adaptive penalty weight.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container, TensorData};
use crate::corpus::{Corpus, Sentence, VerbClassIndex};
use crate::lm::{
    clean_candidates, conditional_logprob, sample_continuations, ConditionalModel, LmError, NgramModel,
    ProposalModel, RawContinuation, SamplingParams, Vocab, EOS,
};
use crate::reward::{ClusterAssignment, RewardTable, RewardTransform, ShapedReward};
use crate::seed::{rng_for, SeededRng};

#[derive(Debug, Error)]
pub enum RsftError {
    #[error("empty query batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint was tuned from reference {expected}, got {got}")]
    ReferenceMismatch { expected: String, got: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsftConfig {
    pub kl_beta: f64,
    pub kl_target: f64,
    pub inner_epochs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub candidates: usize,
    pub learning_rate: f64,
    pub top_k: usize,
    pub max_tokens: usize,
    pub checkpoint_every: usize,
    /// Queries in the fixed probe set used to rank checkpoints.
    pub probe_queries: usize,
    pub reward_transform: RewardTransform,
}

impl Default for RsftConfig {
    fn default() -> Self {
        RsftConfig {
            kl_beta: 0.1,
            kl_target: 6.0,
            inner_epochs: 4,
            epochs: 40,
            batch: 128,
            candidates: 20,
            learning_rate: 0.05,
            top_k: 1000,
            max_tokens: 20,
            checkpoint_every: 10,
            probe_queries: 100,
            reward_transform: RewardTransform::Exp,
        }
    }
}

impl RsftConfig {
    pub fn validate(&self) -> Result<(), RsftError> {
        let bad = |m: &str| Err(RsftError::Config(m.to_string()));
        if !(self.kl_beta > 0.0) || !(self.kl_target > 0.0) {
            return bad("kl_beta and kl_target must be positive");
        }
        if self.inner_epochs == 0 || self.epochs == 0 || self.batch == 0 || self.candidates == 0 {
            return bad("inner_epochs, epochs, batch and candidates must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a non-negative number");
        }
        if self.top_k == 0 || self.max_tokens == 0 || self.checkpoint_every == 0 {
            return bad("top_k, max_tokens and checkpoint_every must be at least 1");
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingParams {
        SamplingParams { top_k: self.top_k, max_tokens: self.max_tokens }
    }
}

/// An n-gram model with per-context adjusted conditionals.
#[derive(Debug, Clone)]
pub struct TunedModel {
    reference: Arc<NgramModel>,
    /// Normalized log-probabilities; `-inf` where the reference has no mass.
    log_probs: BTreeMap<Vec<u32>, Vec<f64>>,
}

fn log_normalize(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    v.iter_mut().for_each(|x| *x -= z);
}

impl TunedModel {
    pub fn new(reference: Arc<NgramModel>) -> Self {
        TunedModel { reference, log_probs: BTreeMap::new() }
    }

    pub fn reference(&self) -> &NgramModel {
        &self.reference
    }

    /// Number of contexts whose conditional differs from the reference.
    pub fn tuned_contexts(&self) -> usize {
        self.log_probs.len()
    }

    fn entry(&mut self, context: &[u32]) -> &mut Vec<f64> {
        let reference = &self.reference;
        self.log_probs
            .entry(context.to_vec())
            .or_insert_with(|| reference.next_distribution(context).iter().map(|p| p.ln()).collect())
    }

    /// Add `step` to the log-probabilities at `context` and renormalize.
    fn nudge(&mut self, context: &[u32], step: &[f64]) {
        let lp = self.entry(context);
        for (x, s) in lp.iter_mut().zip(step) {
            if x.is_finite() {
                *x += s;
            }
        }
        log_normalize(lp);
    }

    pub fn to_container(&self, config: &RsftConfig) -> Container {
        let v = self.reference.vocab().len();
        let width = self.reference.order() - 1;
        let mut c = Container::new("rsft");
        c.text("reference", self.reference.fingerprint());
        c.text("rsft_config", serde_json::to_string(config).expect("config serializes"));
        let ctx: Vec<u32> = self.log_probs.keys().flatten().copied().collect();
        let lp: Vec<f64> = self.log_probs.values().flatten().copied().collect();
        let n = self.log_probs.len() as u64;
        c.push("contexts", vec![n, width as u64], TensorData::U32(ctx));
        c.push("log_probs", vec![n, v as u64], TensorData::F64(lp));
        c
    }

    pub fn from_container(c: &Container, reference: Arc<NgramModel>) -> Result<(Self, RsftConfig), RsftError> {
        c.expect_kind("rsft")?;
        let expected = c.get_text("reference")?.to_string();
        let got = reference.fingerprint();
        if expected != got {
            return Err(RsftError::ReferenceMismatch { expected, got });
        }
        let config: RsftConfig = serde_json::from_str(c.get_text("rsft_config")?).map_err(|e| {
            CheckpointError::BadSection { name: "rsft_config".into(), reason: e.to_string() }
        })?;
        let (cshape, ctx) = c.get_u32("contexts")?;
        let (lshape, lp) = c.get_f64("log_probs")?;
        let v = reference.vocab().len();
        let width = reference.order() - 1;
        let n = cshape.first().copied().unwrap_or(0) as usize;
        if cshape != [n as u64, width as u64] || lshape != [n as u64, v as u64] {
            return Err(CheckpointError::BadSection { name: "log_probs".into(), reason: "shape mismatch".into() }.into());
        }
        let mut log_probs = BTreeMap::new();
        for i in 0..n {
            let key = if width == 0 { Vec::new() } else { ctx[i * width..(i + 1) * width].to_vec() };
            log_probs.insert(key, lp[i * v..(i + 1) * v].to_vec());
        }
        Ok((TunedModel { reference, log_probs }, config))
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &RsftConfig) -> Result<(), RsftError> {
        Ok(self.to_container(config).save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, reference: Arc<NgramModel>) -> Result<(Self, RsftConfig), RsftError> {
        Self::from_container(&Container::load(path)?, reference)
    }
}

impl ConditionalModel for TunedModel {
    fn vocab(&self) -> &Vocab {
        self.reference.vocab()
    }

    fn order(&self) -> usize {
        self.reference.order()
    }

    fn next_distribution(&self, context: &[u32]) -> Vec<f64> {
        match self.log_probs.get(context) {
            Some(lp) => lp.iter().map(|x| x.exp()).collect(),
            None => self.reference.next_distribution(context),
        }
    }
}

impl ProposalModel for TunedModel {
    fn embedding_dim(&self) -> usize {
        self.reference.embedding_dim()
    }

    fn token_embedding(&self, token: &str) -> &[f64] {
        self.reference.token_embedding(token)
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

/// `KL(p ‖ q)` in nats; infinite when `p` has mass where `q` has none.
pub fn kl_between(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    kl.max(0.0)
}

/// KL of the next-token distributions of `tuned` and `reference` at `context`.
pub fn kl_divergence<T, R>(tuned: &T, reference: &R, context: &[u32]) -> f64
where
    T: ConditionalModel + ?Sized,
    R: ConditionalModel + ?Sized,
{
    kl_between(&tuned.next_distribution(context), &reference.next_distribution(context))
}

/// Proportional controller on the penalty weight; each call moves it by at
/// most 20%.
pub fn adapt_kl_beta(beta: f64, observed_kl: f64, config: &RsftConfig) -> f64 {
    let err = ((observed_kl - config.kl_target) / config.kl_target).clamp(-0.2, 0.2);
    beta * (1.0 + err)
}

/// The `(context, token)` steps a model took to produce `tokens` after
/// `prompt`, including the final `</s>` when the sample ended on one.
fn trajectory<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[String],
    tokens: &[String],
    max_tokens: usize,
) -> Vec<(Vec<u32>, u32)> {
    let vocab = model.vocab();
    let mut history: Vec<u32> = prompt.iter().map(|t| vocab.id(t)).collect();
    let mut steps = Vec::with_capacity(tokens.len() + 1);
    for t in tokens {
        let id = vocab.id(t);
        steps.push((model.context_of(&history), id));
        history.push(id);
    }
    let ended_on_terminator = tokens.last().is_some_and(|t| crate::corpus::is_terminator(t));
    if !ended_on_terminator && tokens.len() < max_tokens {
        steps.push((model.context_of(&history), EOS));
    }
    steps
}

fn sequence_kl(model: &TunedModel, steps: &[(Vec<u32>, u32)]) -> f64 {
    steps.iter().map(|(ctx, _)| kl_divergence(model, model.reference.as_ref(), ctx)).sum()
}

/// Per-sample shaped rewards for `raw` continuations of `query`; samples that
/// do not clean to a valid candidate earn 0. The second value reports whether
/// any candidate moves forward.
fn score_samples(
    raw: &[RawContinuation],
    query: &Sentence,
    index: &VerbClassIndex,
    shaped: &ShapedReward<'_>,
    max_tokens: usize,
) -> (Vec<f64>, bool) {
    let source = query.verb_class();
    let mut rewards = vec![0.0; raw.len()];
    let mut forward = false;
    for (i, r) in raw.iter().enumerate() {
        if let Some(c) = clean_candidates(std::slice::from_ref(r), index, max_tokens).into_iter().next() {
            rewards[i] = shaped.reward(c.verb_class(), source);
            forward |= shaped.delta(c.verb_class(), source).is_some_and(|d| d > 0);
        }
    }
    (rewards, forward)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub queries_used: usize,
    pub queries_skipped: usize,
    pub mean_reward: f64,
    /// Mean over used samples of the summed per-step KL, after the update.
    pub mean_kl: f64,
}

struct Sample {
    steps: Vec<(Vec<u32>, u32)>,
    old_probs: Vec<f64>,
    advantage: f64,
    reward: f64,
}

/// One fine-tuning step on a batch of queries.
///
/// Gradients are formed per context: the likelihood-ratio term is averaged
/// over the samples that visited the context and the KL penalty applies to
/// that context's conditional, so rarely visited contexts move as fast as
/// common ones.
pub fn rsft_step(
    model: &mut TunedModel,
    queries: &[Sentence],
    index: &VerbClassIndex,
    shaped: &ShapedReward<'_>,
    beta: f64,
    config: &RsftConfig,
    rng: &mut SeededRng,
) -> Result<StepStats, RsftError> {
    if queries.is_empty() {
        return Err(RsftError::EmptyBatch);
    }
    let params = config.sampling();
    let mut samples: Vec<Sample> = Vec::new();
    let mut skipped = 0;
    for q in queries {
        let raw = model.generate(&q.tokens, config.candidates, &params, rng)?;
        let (rewards, forward) = score_samples(&raw, q, index, shaped, config.max_tokens);
        if !forward {
            skipped += 1;
            continue;
        }
        let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
        for (r, reward) in raw.iter().zip(rewards) {
            let steps = trajectory(model, &q.tokens, &r.tokens, config.max_tokens);
            let old_probs = steps.iter().map(|(ctx, id)| model.next_distribution(ctx)[*id as usize]).collect();
            samples.push(Sample { steps, old_probs, advantage: reward - baseline, reward });
        }
    }
    let used = queries.len() - skipped;
    if samples.is_empty() {
        return Ok(StepStats { queries_used: 0, queries_skipped: skipped, mean_reward: 0.0, mean_kl: 0.0 });
    }
    let n = samples.len() as f64;
    let mut visits: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for s in &samples {
        for (ctx, _) in &s.steps {
            *visits.entry(ctx.clone()).or_default() += 1.0;
        }
    }
    for _ in 0..config.inner_epochs {
        let mut grads: BTreeMap<Vec<u32>, Vec<f64>> = BTreeMap::new();
        let dists: BTreeMap<&Vec<u32>, Vec<f64>> = visits.keys().map(|c| (c, model.next_distribution(c))).collect();
        let v = model.vocab().len();
        for s in &samples {
            if s.advantage == 0.0 {
                continue;
            }
            for ((ctx, id), old) in s.steps.iter().zip(&s.old_probs) {
                let p = &dists[ctx];
                let weight = s.advantage * p[*id as usize] / old / visits[ctx];
                let g = grads.entry(ctx.clone()).or_insert_with(|| vec![0.0; v]);
                for (gi, pi) in g.iter_mut().zip(p) {
                    *gi -= weight * pi;
                }
                g[*id as usize] += weight;
            }
        }
        for ctx in visits.keys() {
            let p = &dists[ctx];
            let q = model.reference.next_distribution(ctx);
            let kl = kl_between(p, &q);
            let g = grads.entry(ctx.clone()).or_insert_with(|| vec![0.0; v]);
            for i in 0..v {
                if p[i] > 0.0 {
                    g[i] -= beta * p[i] * ((p[i] / q[i]).ln() - kl);
                }
            }
        }
        for (ctx, g) in grads {
            let step: Vec<f64> = g.iter().map(|x| config.learning_rate * x).collect();
            model.nudge(&ctx, &step);
        }
    }
    let mean_reward = samples.iter().map(|s| s.reward).sum::<f64>() / n;
    let mean_kl = samples.iter().map(|s| sequence_kl(model, &s.steps)).sum::<f64>() / n;
    Ok(StepStats { queries_used: used, queries_skipped: skipped, mean_reward, mean_kl })
}

/// Mean shaped reward of `per_query` samples from `model` for each query.
/// Query `i` draws from its own stream derived from `seed`.
pub fn mean_sample_reward(
    model: &dyn ProposalModel,
    queries: &[Sentence],
    index: &VerbClassIndex,
    shaped: &ShapedReward<'_>,
    per_query: usize,
    params: &SamplingParams,
    seed: u64,
) -> Result<f64, RsftError> {
    if queries.is_empty() {
        return Err(RsftError::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("rsft/probe/{i}"));
        let raw = model.generate(&q.tokens, per_query, params, &mut rng)?;
        total += score_samples(&raw, q, index, shaped, params.max_tokens).0.iter().sum::<f64>();
    }
    Ok(total / (queries.len() * per_query) as f64)
}

/// Mean summed per-step KL to the reference over `per_query` samples of
/// `model` for each query.
pub fn mean_sample_kl(
    model: &TunedModel,
    queries: &[Sentence],
    per_query: usize,
    params: &SamplingParams,
    seed: u64,
) -> Result<f64, RsftError> {
    if queries.is_empty() {
        return Err(RsftError::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("rsft/kl/{i}"));
        for r in model.generate(&q.tokens, per_query, params, &mut rng)? {
            total += sequence_kl(model, &trajectory(model, &q.tokens, &r.tokens, params.max_tokens));
        }
    }
    Ok(total / (queries.len() * per_query) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsftEpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub stats: StepStats,
}

impl std::fmt::Display for RsftEpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={}\tmean_reward={}\tmean_kl={}\tbeta={}\tqueries={}\tskipped={}",
            self.epoch,
            self.stats.mean_reward,
            self.stats.mean_kl,
            self.beta,
            self.stats.queries_used,
            self.stats.queries_skipped
        )
    }
}

#[derive(Debug, Clone)]
pub struct RsftCheckpoint {
    pub epoch: usize,
    /// Mean shaped reward on the probe queries.
    pub probe_reward: f64,
    pub path: Option<PathBuf>,
    pub model: TunedModel,
}

pub struct RsftOutcome {
    /// The checkpoint with the highest probe reward (later epochs win ties).
    pub model: TunedModel,
    pub best_epoch: usize,
    pub checkpoints: Vec<RsftCheckpoint>,
    pub log: Vec<RsftEpochLog>,
}

/// Fine-tune `reference` on query sentences drawn from `train` (annotated).
/// Every sentence whose verb class is clustered is a potential query.
#[allow(clippy::too_many_arguments)]
pub fn train_rsft(
    reference: Arc<NgramModel>,
    train: &Corpus,
    index: &VerbClassIndex,
    table: &RewardTable,
    clusters: &ClusterAssignment,
    config: &RsftConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<RsftOutcome, RsftError> {
    config.validate()?;
    let pool: Vec<Sentence> = train
        .sentences()
        .filter(|s| s.verb_class().is_some_and(|c| clusters.cluster(c).is_some()))
        .cloned()
        .collect();
    if pool.is_empty() {
        return Err(RsftError::EmptyBatch);
    }
    let shaped = ShapedReward::new(table, clusters, config.reward_transform);
    let probe: Vec<Sentence> = {
        let mut rng = rng_for(seed, "rsft/probe-set");
        let k = config.probe_queries.min(pool.len());
        let mut idx = sample_indices(&mut rng, pool.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let params = config.sampling();
    let mut model = TunedModel::new(reference);
    let mut beta = config.kl_beta;
    let mut rng = rng_for(seed, "rsft/train");
    let mut log = Vec::with_capacity(config.epochs);
    let mut checkpoints: Vec<RsftCheckpoint> = Vec::new();
    for epoch in 1..=config.epochs {
        let k = config.batch.min(pool.len());
        let batch: Vec<Sentence> =
            sample_indices(&mut rng, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect();
        let stats = rsft_step(&mut model, &batch, index, &shaped, beta, config, &mut rng)?;
        log.push(RsftEpochLog { epoch, beta, stats });
        log::info!("{}", log.last().expect("just pushed"));
        if stats.queries_used > 0 {
            beta = adapt_kl_beta(beta, stats.mean_kl, config);
        }
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            let probe_reward =
                mean_sample_reward(&model, &probe, index, &shaped, config.candidates, &params, seed)?;
            let path = match checkpoint_dir {
                Some(dir) => {
                    let p = dir.join(format!("rsft-epoch-{epoch:03}.ckpt"));
                    model.save(&p, config)?;
                    Some(p)
                }
                None => None,
            };
            checkpoints.push(RsftCheckpoint { epoch, probe_reward, path, model: model.clone() });
        }
    }
    let best = checkpoints
        .iter()
        .enumerate()
        .fold(0, |b, (i, c)| if c.probe_reward >= checkpoints[b].probe_reward { i } else { b });
    Ok(RsftOutcome {
        model: checkpoints[best].model.clone(),
        best_epoch: checkpoints[best].epoch,
        checkpoints,
        log,
    })
}
