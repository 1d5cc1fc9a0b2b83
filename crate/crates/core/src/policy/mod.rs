//! Knowledge-graph DQN: Q-network, experience replay, cluster-pruned
//! ε-greedy selection and the training loop.

mod qnet;
mod train;

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::{Sentence, VerbClass};
use crate::kg::{KgError, KnowledgeGraph};
use crate::lm::{mean_embedding, Candidate, LmError, ProposalModel};
use crate::nn::{Optimizer, OptimizerConfig, ParamSet};
use crate::reward::{ClusterAssignment, RewardTransform};
use crate::seed::SeededRng;

pub use qnet::{q_value, QNetConfig, QNetworkParams, StateEncoder, StateInput, StateMode, StateVector};
pub use train::{train_dqn, CheckpointRecord, DqnEnv, DqnOutcome, EpisodeLog};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no candidates to choose from")]
    EmptyCandidates,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("state input does not match the network's state mode")]
    StateModeMismatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub epsilon_start: f64,
    pub epsilon_floor: f64,
    pub decay_divisor: f64,
    pub batch: usize,
    pub replay_capacity: usize,
    /// Raw continuations sampled per step.
    pub breadth: usize,
    pub top_k: usize,
    pub max_tokens: usize,
    pub max_continuations: usize,
    /// Stories between replay updates.
    pub replay_update_period: usize,
    /// Gradient steps per replay update.
    pub updates_per_replay: usize,
    /// Stories between target-network syncs.
    pub target_sync_period: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    /// Share of training stories held out to pick the best checkpoint.
    pub selection_fraction: f64,
    pub reward_transform: RewardTransform,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            gamma: 0.99,
            learning_rate: 0.001,
            optimizer: OptimizerConfig::Sgd,
            epsilon_start: 0.1,
            epsilon_floor: 0.01,
            decay_divisor: 1000.0,
            batch: 256,
            replay_capacity: 800,
            breadth: 25,
            top_k: 1000,
            max_tokens: 20,
            max_continuations: 15,
            replay_update_period: 100,
            updates_per_replay: 1,
            target_sync_period: 300,
            epochs: 20,
            checkpoint_every: 5,
            selection_fraction: 0.1,
            reward_transform: RewardTransform::Exp,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = [
            ("batch", self.batch),
            ("replay_capacity", self.replay_capacity),
            ("breadth", self.breadth),
            ("top_k", self.top_k),
            ("max_tokens", self.max_tokens),
            ("max_continuations", self.max_continuations),
            ("replay_update_period", self.replay_update_period),
            ("target_sync_period", self.target_sync_period),
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(PolicyError::Config(format!("{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(PolicyError::Config("gamma must lie in [0, 1]".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(PolicyError::Config("learning_rate must be non-negative".into()));
        }
        if !(self.epsilon_floor >= 0.0 && self.epsilon_floor < self.epsilon_start && self.epsilon_start <= 1.0) {
            return Err(PolicyError::Config("need 0 <= epsilon_floor < epsilon_start <= 1".into()));
        }
        if !(self.decay_divisor >= 1.0) {
            return Err(PolicyError::Config("decay_divisor must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.selection_fraction) {
            return Err(PolicyError::Config("selection_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One decay step toward the floor: `ε − (ε − floor) / divisor`.
pub fn epsilon_step(epsilon: f64, config: &DqnConfig) -> f64 {
    epsilon - (epsilon - config.epsilon_floor) / config.decay_divisor
}

/// `⟨G_t, a_{t+1}, G_{t+1}, reward, query⟩` plus the candidates proposed at
/// the successor step, used for the bootstrap maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub graph_before: KnowledgeGraph,
    pub query: Sentence,
    pub action: Candidate,
    pub graph_after: KnowledgeGraph,
    pub reward: f64,
    pub terminal: bool,
    pub next_candidates: Vec<Candidate>,
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// `batch` transitions without replacement, or with replacement (and a
    /// warning) when the buffer holds fewer.
    pub fn sample(&self, batch: usize, rng: &mut SeededRng) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        if self.items.len() >= batch {
            sample_indices(rng, self.items.len(), batch).into_iter().map(|i| &self.items[i]).collect()
        } else {
            log::warn!("replay buffer holds {} < batch {}; sampling with replacement", self.items.len(), batch);
            (0..batch).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
        }
    }
}

pub fn push_transition(buffer: &mut ReplayBuffer, t: Transition) {
    buffer.push(t);
}

pub fn sync_target(params: &QNetworkParams) -> QNetworkParams {
    params.clone()
}

/// Indices of candidates one cluster closer to the goal than `source` (or in
/// the same cluster when `source` already sits in the goal cluster).
pub fn prune_candidates(candidates: &[Candidate], clusters: &ClusterAssignment, source: Option<&VerbClass>) -> Vec<usize> {
    let Some(src) = source.and_then(|s| clusters.cluster(s)) else { return Vec::new() };
    let wanted = if Some(src) == clusters.goal_cluster { 0 } else { 1 };
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| clusters.cluster(c.verb_class()).map(|t| t as i64 - src as i64) == Some(wanted))
        .map(|(i, _)| i)
        .collect()
}

/// Position in `pool` of the highest value; the earliest wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice among `candidates`, returning an index into it.
///
/// Exploitation restricts to [`prune_candidates`] when that set is non-empty
/// and otherwise considers every candidate; `q_of` is only called for the
/// candidates under consideration.
pub fn select_with<F>(
    candidates: &[Candidate],
    epsilon: f64,
    clusters: &ClusterAssignment,
    source: Option<&VerbClass>,
    rng: &mut SeededRng,
    mut q_of: F,
) -> Result<usize, PolicyError>
where
    F: FnMut(usize) -> Result<f64, PolicyError>,
{
    match candidates.len() {
        0 => return Err(PolicyError::EmptyCandidates),
        1 => return Ok(0),
        _ => {}
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..candidates.len()));
    }
    let mut pool = prune_candidates(candidates, clusters, source);
    if pool.is_empty() {
        pool = (0..candidates.len()).collect();
    }
    let qs = pool.iter().map(|&i| q_of(i)).collect::<Result<Vec<_>, _>>()?;
    Ok(pool[argmax_first(&qs)])
}

#[allow(clippy::too_many_arguments)]
pub fn select_action<M: ProposalModel + ?Sized>(
    candidates: &[Candidate],
    state: &StateInput,
    params: &QNetworkParams,
    epsilon: f64,
    clusters: &ClusterAssignment,
    source: Option<&VerbClass>,
    embedder: &M,
    rng: &mut SeededRng,
) -> Result<usize, PolicyError> {
    let mut cached: Option<StateVector> = None;
    select_with(candidates, epsilon, clusters, source, rng, |i| {
        if cached.is_none() {
            cached = Some(params.state_vector(state)?);
        }
        let sv = cached.as_ref().expect("just set");
        Ok(params.q_from_state(sv, &mean_embedding(embedder, &candidates[i].tokens)))
    })
}

/// Bootstrap targets `y_j = r_j` for terminal transitions or those without
/// successor candidates, else `r_j + γ max_a' Q_target(G_{j+1}, a')`.
pub fn td_targets<M: ProposalModel + ?Sized>(
    batch: &[&Transition],
    target: &QNetworkParams,
    gamma: f64,
    embedder: &M,
) -> Result<Vec<f64>, PolicyError> {
    batch
        .iter()
        .map(|t| {
            if t.terminal || t.next_candidates.is_empty() || gamma == 0.0 {
                return Ok(t.reward);
            }
            let next = StateInput::build(target.config.state, &t.graph_after, &t.action.tokens, embedder);
            let sv = target.state_vector(&next)?;
            let best = t
                .next_candidates
                .iter()
                .map(|c| target.q_from_state(&sv, &mean_embedding(embedder, &c.tokens)))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(t.reward + gamma * best)
        })
        .collect()
}

fn loss_and_grad<M: ProposalModel + ?Sized>(
    batch: &[&Transition],
    targets: &[f64],
    params: &QNetworkParams,
    embedder: &M,
    grads: Option<&mut QNetworkParams>,
) -> Result<f64, PolicyError> {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = grads;
    for (t, &y) in batch.iter().zip(targets) {
        let state = StateInput::build(params.config.state, &t.graph_before, &t.query.tokens, embedder);
        let action = mean_embedding(embedder, &t.action.tokens);
        let q = match grads.as_deref_mut() {
            Some(g) => params.q_with_grad(&state, &action, |q| 2.0 * (q - y) / n, g)?,
            None => params.q(&state, &action)?,
        };
        loss += (y - q).powi(2) / n;
    }
    Ok(loss)
}

/// Mean squared TD error of `transitions` under `params`, with bootstrap
/// values from `target`.
pub fn td_loss<M: ProposalModel + ?Sized>(
    transitions: &[&Transition],
    params: &QNetworkParams,
    target: &QNetworkParams,
    gamma: f64,
    embedder: &M,
) -> Result<f64, PolicyError> {
    let targets = td_targets(transitions, target, gamma, embedder)?;
    loss_and_grad(transitions, &targets, params, embedder, None)
}

/// One optimizer step on the mean squared TD error of a sampled batch.
/// Returns the batch loss before the step. `target` is read only.
pub fn replay_update<M: ProposalModel + ?Sized>(
    buffer: &ReplayBuffer,
    params: &mut QNetworkParams,
    target: &QNetworkParams,
    optimizer: &mut Optimizer<QNetworkParams>,
    gamma: f64,
    batch: usize,
    embedder: &M,
    rng: &mut SeededRng,
) -> Result<f64, PolicyError> {
    if buffer.is_empty() {
        return Err(PolicyError::EmptyBuffer);
    }
    let sample = buffer.sample(batch, rng);
    let targets = td_targets(&sample, target, gamma, embedder)?;
    let mut grads = params.zeros_like();
    let loss = loss_and_grad(&sample, &targets, params, embedder, Some(&mut grads))?;
    optimizer.step(params, &grads);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VerbMatch;
    use crate::seed::rng_from_seed;
    use std::collections::BTreeMap;

    fn cand(i: usize, class: &str) -> Candidate {
        Candidate {
            index: i,
            text: format!("c{i}"),
            tokens: vec![format!("c{i}")],
            verb: VerbMatch { position: 0, lemma: "x".into(), class: class.into() },
        }
    }

    fn clusters() -> ClusterAssignment {
        let values: BTreeMap<VerbClass, f64> =
            [("a", -3.0), ("b", -2.0), ("c", -1.0), ("g", 0.0)].iter().map(|(k, v)| (VerbClass::from(*k), *v)).collect();
        let labels = values.keys().cloned().zip(0..).collect();
        ClusterAssignment::from_labels(&values, labels, Some("g".into()))
    }

    fn transition(i: usize) -> Transition {
        Transition {
            graph_before: KnowledgeGraph::new(),
            query: Sentence::new("q"),
            action: cand(i, "a"),
            graph_after: KnowledgeGraph::new(),
            reward: i as f64,
            terminal: true,
            next_candidates: vec![],
        }
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = DqnConfig::default();
        assert!((epsilon_step(0.1, &cfg) - 0.09991).abs() < 1e-15);
        assert_eq!(epsilon_step(0.01, &cfg), 0.01);
        let mut e = 0.1;
        for _ in 0..1000 {
            e = epsilon_step(e, &cfg);
        }
        let closed = 0.01 + 0.09 * (1.0f64 - 1.0 / 1000.0).powi(1000);
        assert!((e - closed).abs() < 1e-12);
        assert!((e - 0.0431).abs() < 1e-4);
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = ReplayBuffer::new(2);
        for i in 1..=3 {
            push_transition(&mut b, transition(i));
        }
        assert_eq!(b.iter().map(|t| t.action.index).collect::<Vec<_>>(), vec![2, 3]);
        let mut big = ReplayBuffer::new(800);
        for i in 0..800 {
            big.push(transition(i));
        }
        assert_eq!(big.len(), 800);
    }

    #[test]
    fn undersized_buffer_samples_with_replacement() {
        let mut b = ReplayBuffer::new(10);
        b.push(transition(0));
        b.push(transition(1));
        assert_eq!(b.sample(5, &mut rng_from_seed(0)).len(), 5);
    }

    #[test]
    fn selection_rules() {
        let c = clusters();
        let mut rng = rng_from_seed(0);
        let one = [cand(0, "a")];
        assert_eq!(select_with(&one, 1.0, &c, Some(&"a".into()), &mut rng, |_| unreachable!()).unwrap(), 0);
        // only "b" is one cluster ahead of "a"; it wins despite a lower Q
        let two = [cand(0, "c"), cand(1, "b")];
        let q = [5.0, 0.1];
        assert_eq!(select_with(&two, 0.0, &c, Some(&"a".into()), &mut rng, |i| Ok(q[i])).unwrap(), 1);
        // nothing one cluster ahead of "g" except same-cluster: fallback to argmax
        let three = [cand(0, "a"), cand(1, "a"), cand(2, "b")];
        let q = [0.2, 0.9, 0.5];
        assert_eq!(select_with(&three, 0.0, &c, Some(&"c".into()), &mut rng, |i| Ok(q[i])).unwrap(), 1);
        // in the goal cluster, same-cluster moves are kept
        let goal = [cand(0, "a"), cand(1, "g")];
        assert_eq!(prune_candidates(&goal, &c, Some(&"g".into())), vec![1]);
        assert!(matches!(select_with(&[], 0.0, &c, None, &mut rng, |_| Ok(0.0)), Err(PolicyError::EmptyCandidates)));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
    }
}
