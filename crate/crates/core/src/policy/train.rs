use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    epsilon_step, replay_update, select_action, sync_target, DqnConfig, PolicyError, QNetConfig, QNetworkParams,
    ReplayBuffer, StateInput, Transition,
};
use crate::corpus::{Corpus, Story, VerbClass, VerbClassIndex};
use crate::eval::{generate_story, goal_rate, GenerationConfig, Generator, TerminalCause};
use crate::kg::{extract_triples, KnowledgeGraph};
use crate::lm::{clean_candidates, Candidate, ProposalModel, SamplingParams};
use crate::nn::{Optimizer, ParamSet};
use crate::reward::{ClusterAssignment, RewardTable, ShapedReward};
use crate::seed::{rng_for, SeededRng};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub epoch: usize,
    pub story_id: String,
    pub length: usize,
    /// `None` when the story was skipped for lack of valid first candidates.
    pub cause: Option<TerminalCause>,
    pub cumulative_reward: f64,
    pub epsilon: f64,
}

impl fmt::Display for EpisodeLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cause = self.cause.map_or("skipped".to_string(), |c| c.to_string());
        write!(
            f,
            "epoch={}\tstory={}\tlength={}\tcause={}\treward={}\tepsilon={}",
            self.epoch, self.story_id, self.length, cause, self.cumulative_reward, self.epsilon
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    /// Greedy goal rate on the held-out selection stories.
    pub selection_goal_rate: Option<f64>,
    pub path: Option<PathBuf>,
    pub checksum: String,
}

pub struct DqnOutcome {
    /// Parameters of the selected checkpoint.
    pub params: QNetworkParams,
    pub best_epoch: usize,
    pub checkpoints: Vec<CheckpointRecord>,
    pub log: Vec<EpisodeLog>,
}

/// Everything the training loop reads but never changes.
#[derive(Clone, Copy)]
pub struct DqnEnv<'a> {
    pub lm: &'a dyn ProposalModel,
    pub index: &'a VerbClassIndex,
    pub table: &'a RewardTable,
    pub clusters: &'a ClusterAssignment,
}

fn propose(
    env: &DqnEnv<'_>,
    history: &[String],
    config: &DqnConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Candidate>, PolicyError> {
    let params = SamplingParams { top_k: config.top_k, max_tokens: config.max_tokens };
    let raw = env.lm.generate(history, config.breadth, &params, rng)?;
    Ok(clean_candidates(&raw, env.index, config.max_tokens))
}

struct Episode {
    cause: Option<TerminalCause>,
    length: usize,
    reward: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    story: &Story,
    env: &DqnEnv<'_>,
    config: &DqnConfig,
    params: &QNetworkParams,
    buffer: &mut ReplayBuffer,
    epsilon: &mut f64,
    shaped: &ShapedReward<'_>,
    rng: &mut SeededRng,
) -> Result<Episode, PolicyError> {
    let goal = env.table.goal();
    let Some(seed) = story.sentences.first() else {
        return Ok(Episode { cause: None, length: 0, reward: 0.0 });
    };
    let mut graph = KnowledgeGraph::new().update(&extract_triples(seed));
    let mut history = seed.tokens.clone();
    let mut query = seed.clone();
    let mut source: Option<VerbClass> = seed.verb_class().filter(|c| env.clusters.cluster(c).is_some()).cloned();
    let mut candidates = propose(env, &history, config, rng)?;
    if candidates.is_empty() {
        return Ok(Episode { cause: None, length: 0, reward: 0.0 });
    }
    let mut total = 0.0;
    for step in 1..=config.max_continuations {
        let state = StateInput::build(params.config.state, &graph, &query.tokens, env.lm);
        let chosen = select_action(&candidates, &state, params, *epsilon, env.clusters, source.as_ref(), env.lm, rng)?;
        let action = candidates[chosen].clone();
        let reward = shaped.reward(action.verb_class(), source.as_ref());
        total += reward;
        let sentence = action.to_sentence();
        let next_graph = graph.update(&extract_triples(&sentence));
        history.extend(action.tokens.iter().cloned());
        let terminal = action.verb_class() == goal;
        let next_candidates = if terminal { Vec::new() } else { propose(env, &history, config, rng)? };
        buffer.push(Transition {
            graph_before: graph,
            query,
            action: action.clone(),
            graph_after: next_graph.clone(),
            reward,
            terminal,
            next_candidates: next_candidates.clone(),
        });
        *epsilon = epsilon_step(*epsilon, config);
        if env.clusters.cluster(action.verb_class()).is_some() {
            source = Some(action.verb_class().clone());
        }
        let cause = if terminal {
            Some(TerminalCause::GoalReached)
        } else if next_candidates.is_empty() {
            Some(TerminalCause::NoValidCandidates)
        } else if step == config.max_continuations {
            Some(TerminalCause::LengthLimit)
        } else {
            None
        };
        if let Some(cause) = cause {
            return Ok(Episode { cause: Some(cause), length: step, reward: total });
        }
        graph = next_graph;
        query = sentence;
        candidates = next_candidates;
    }
    unreachable!("loop returns by the length limit")
}

fn selection_goal_rate(
    stories: &[Story],
    env: &DqnEnv<'_>,
    params: &QNetworkParams,
    config: &DqnConfig,
    seed: u64,
    epoch: usize,
) -> Result<Option<f64>, PolicyError> {
    if stories.is_empty() {
        return Ok(None);
    }
    let gen = Generator::Policy { lm: env.lm, qnet: params, clusters: env.clusters, epsilon: 0.0 };
    let gcfg = GenerationConfig {
        breadth: config.breadth,
        sample_breadth: 1,
        max_continuations: config.max_continuations,
        top_k: config.top_k,
        max_tokens: config.max_tokens,
    };
    let mut out = Vec::with_capacity(stories.len());
    for (i, s) in stories.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("dqn/select/{epoch}/{i}"));
        if let Some(first) = s.sentences.first() {
            match generate_story(first, env.table.goal(), &gen, env.index, &gcfg, &mut rng) {
                Ok(story) => out.push(story),
                Err(crate::eval::EvalError::Policy(e)) => return Err(e),
                Err(crate::eval::EvalError::Lm(e)) => return Err(e.into()),
                Err(e) => log::warn!("selection story {i}: {e}"),
            }
        }
    }
    Ok(goal_rate(&out).ok())
}

/// Run the DQN training loop over `train` (annotated).
///
/// A `selection_fraction` share of the stories is held out; every
/// `checkpoint_every` epochs (and after the last epoch) the current network
/// is scored by greedy goal rate on those stories and the best-scoring
/// checkpoint is returned (later epochs win ties).
pub fn train_dqn(
    train: &Corpus,
    env: &DqnEnv<'_>,
    qnet: &QNetConfig,
    config: &DqnConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<DqnOutcome, PolicyError> {
    config.validate()?;
    if env.lm.embedding_dim() != qnet.encoder.input_dim {
        return Err(PolicyError::Shape { expected: qnet.encoder.input_dim, got: env.lm.embedding_dim() });
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_for(seed, "dqn/selection-split"));
    let n_select = if train.len() > 1 { (train.len() as f64 * config.selection_fraction).round() as usize } else { 0 };
    let (select_idx, train_idx) = order.split_at(n_select);
    let mut select_idx = select_idx.to_vec();
    select_idx.sort_unstable();
    let selection: Vec<Story> = select_idx.iter().map(|&i| train.stories()[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let mut params = QNetworkParams::new(*qnet, &mut rng_for(seed, "dqn/init"));
    let mut target = sync_target(&params);
    let mut optimizer: Optimizer<QNetworkParams> = Optimizer::new(config.optimizer, config.learning_rate);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut rng = rng_for(seed, "dqn/train");
    let mut epsilon = config.epsilon_start;
    let shaped = ShapedReward::new(env.table, env.clusters, config.reward_transform);
    let config_echo = serde_json::to_string(config).expect("config serializes");
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut snapshots: Vec<QNetworkParams> = Vec::new();
    let mut stories_seen = 0usize;
    for epoch in 1..=config.epochs {
        let mut epoch_order = train_idx.clone();
        epoch_order.shuffle(&mut rng);
        for &si in &epoch_order {
            let story = &train.stories()[si];
            let ep = run_episode(story, env, config, &params, &mut buffer, &mut epsilon, &shaped, &mut rng)?;
            if ep.cause.is_none() {
                log::info!("story {}: no valid first candidates; skipped", story.id);
            }
            log.push(EpisodeLog {
                epoch,
                story_id: story.id.clone(),
                length: ep.length,
                cause: ep.cause,
                cumulative_reward: ep.reward,
                epsilon,
            });
            stories_seen += 1;
            if stories_seen % config.replay_update_period == 0 && !buffer.is_empty() {
                for _ in 0..config.updates_per_replay {
                    replay_update(&buffer, &mut params, &target, &mut optimizer, config.gamma, config.batch, env.lm, &mut rng)?;
                }
            }
            if stories_seen % config.target_sync_period == 0 {
                target = sync_target(&params);
            }
        }
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            let rate = selection_goal_rate(&selection, env, &params, config, seed, epoch)?;
            let path = match checkpoint_dir {
                Some(dir) => {
                    let p = dir.join(format!("dqn-epoch-{epoch:03}.ckpt"));
                    params.save(&p, &config_echo)?;
                    Some(p)
                }
                None => None,
            };
            log::info!("epoch {epoch}: selection goal rate {rate:?}");
            checkpoints.push(CheckpointRecord { epoch, selection_goal_rate: rate, path, checksum: params.checksum() });
            snapshots.push(params.clone());
        }
    }
    let mut best = snapshots.len() - 1;
    for (i, c) in checkpoints.iter().enumerate() {
        let score = c.selection_goal_rate.unwrap_or(f64::NEG_INFINITY);
        if score >= checkpoints[best].selection_goal_rate.unwrap_or(f64::NEG_INFINITY) {
            best = i;
        }
    }
    Ok(DqnOutcome {
        best_epoch: checkpoints[best].epoch,
        params: snapshots.swap_remove(best),
        checkpoints,
        log,
    })
}
