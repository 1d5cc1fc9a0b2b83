//! Run configuration and the on-disk pipeline stages.
//!
//! Artifacts live under `output_dir`:
//!
//! | file | written by |
//! |---|---|
//! | `train.txt`, `test.txt`, `train.manifest`, `test.manifest` | [`preprocess`] |
//! | `rewards.tsv` | [`rewards`] |
//! | `lm.ckpt` | [`fit_lm`] (or the first training stage that needs it) |
//! | `kg-dqn.ckpt`, `kg-dqn/`, `kg-dqn.log` | [`train_policy`] with graph state |
//! | `dqn.ckpt`, `dqn/`, `dqn.log` | [`train_policy`] with query state |
//! | `rsft.ckpt`, `rsft/`, `rsft.log` | [`train_tuned`] |
//! | `report.txt`, `report.json`, `stories.txt` | [`evaluate_models`] |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::{
    load_corpus, load_verbnet_index, split_corpus, tokenize, Corpus, CorpusError, CorpusFormat, Sentence, VerbClass,
    VerbClassIndex,
};
use crate::eval::{evaluate, generate_story, EvalError, EvalModel, EvalReport, GeneratedStory, GenerationConfig, Generator};
use crate::lm::{train_ngram, LmError, NgramConfig, NgramModel, ProposalModel, RemoteConfig, RemoteModel};
use crate::policy::{train_dqn, DqnConfig, DqnEnv, PolicyError, QNetConfig, QNetworkParams, StateMode};
use crate::reward::{
    compute_reward_table, read_reward_file, write_reward_file, ClusterAssignment, RewardError, RewardTable,
};
use crate::rsft::{train_rsft, RsftConfig, RsftError, TunedModel};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rsft(#[from] RsftError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn lm_is_external(e: &LmError) -> bool {
    matches!(e, LmError::Remote(_))
}

impl PipelineError {
    /// 2 usage/config, 3 data/precondition, 4 external service.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Corpus(CorpusError::Io { .. }) => 2,
            PipelineError::Corpus(CorpusError::UnknownFormat(_) | CorpusError::BadFraction(_)) => 2,
            PipelineError::Lm(e) | PipelineError::Policy(PolicyError::Lm(e)) | PipelineError::Rsft(RsftError::Lm(e))
                if lm_is_external(e) =>
            {
                4
            }
            PipelineError::Eval(e) if e.is_external() => 4,
            PipelineError::Policy(PolicyError::Config(_)) | PipelineError::Rsft(RsftError::Config(_)) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    pub verbnet: PathBuf,
    #[serde(default = "default_split")]
    pub split: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { path: PathBuf::new(), format: default_format(), verbnet: PathBuf::new(), split: default_split() }
    }
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Lines
}

fn default_split() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Ngram,
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_timeout() -> u64 {
    RemoteConfig::default().timeout_ms
}

fn default_retries() -> u32 {
    RemoteConfig::default().retries
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    /// Cluster count; chosen by variance fit when absent.
    pub k: Option<usize>,
}

/// Everything one experiment needs, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub goal: Option<String>,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub ngram: NgramConfig,
    #[serde(default)]
    pub rewards: RewardSection,
    #[serde(default)]
    pub qnet: QNetConfig,
    #[serde(default)]
    pub dqn: DqnConfig,
    #[serde(default)]
    pub rsft: RsftConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("goalweaver-out"),
            goal: None,
            corpus: CorpusSection::default(),
            backend: Backend::Ngram,
            ngram: NgramConfig::default(),
            rewards: RewardSection::default(),
            qnet: QNetConfig::default(),
            dqn: DqnConfig::default(),
            rsft: RsftConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.corpus.split > 0.0 && self.corpus.split < 1.0) {
            return bad(format!("corpus.split {} outside (0, 1)", self.corpus.split));
        }
        if self.ngram.order == 0 {
            return bad("ngram.order must be at least 1".into());
        }
        if self.qnet.encoder.input_dim != self.ngram.embedding_dim {
            return bad(format!(
                "qnet.encoder.input_dim ({}) must equal ngram.embedding_dim ({})",
                self.qnet.encoder.input_dim, self.ngram.embedding_dim
            ));
        }
        if self.rewards.k == Some(0) {
            return bad("rewards.k must be at least 1".into());
        }
        self.dqn.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.rsft.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn goal(&self) -> Result<VerbClass, PipelineError> {
        self.goal
            .as_deref()
            .map(VerbClass::new)
            .ok_or_else(|| PipelineError::Config("no goal verb class given".into()))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn require(path: &Path, hint: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Precondition(format!("{} not found; {hint}", path.display())))
    }
}

pub fn load_index(cfg: &RunConfig) -> Result<VerbClassIndex, PipelineError> {
    Ok(load_verbnet_index(&cfg.corpus.verbnet)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub train: usize,
    pub test: usize,
}

/// Split the corpus and write both halves with their id manifests.
pub fn preprocess(cfg: &RunConfig) -> Result<PreprocessSummary, PipelineError> {
    load_index(cfg)?;
    let corpus = load_corpus(&cfg.corpus.path, cfg.corpus.format)?;
    let (train, test) = split_corpus(&corpus, cfg.corpus.split, derive_seed(cfg.seed, "corpus/split"))?;
    for (name, part) in [("train", &train), ("test", &test)] {
        write_file(&cfg.artifact(&format!("{name}.txt")), &part.to_blocks())?;
        let ids: String = part.stories().iter().map(|s| format!("{}\n", s.id)).collect();
        write_file(&cfg.artifact(&format!("{name}.manifest")), &ids)?;
    }
    Ok(PreprocessSummary { train: train.len(), test: test.len() })
}

/// Load a split written by [`preprocess`], annotated with verb classes.
pub fn load_split(cfg: &RunConfig, name: &str, index: &VerbClassIndex) -> Result<Corpus, PipelineError> {
    let path = cfg.artifact(&format!("{name}.txt"));
    require(&path, "run preprocess first")?;
    Ok(load_corpus(&path, CorpusFormat::Blocks)?.annotated(index))
}

/// Compute and store the reward table and clusters for `goal`.
pub fn rewards(cfg: &RunConfig, goal: &VerbClass) -> Result<(RewardTable, ClusterAssignment), PipelineError> {
    let index = load_index(cfg)?;
    let train = load_split(cfg, "train", &index)?;
    let table = compute_reward_table(&train, goal)?;
    let clusters = ClusterAssignment::for_table(&table, cfg.rewards.k)?;
    write_file(&cfg.artifact("rewards.tsv"), &write_reward_file(&table, &clusters))?;
    Ok((table, clusters))
}

pub fn load_rewards(cfg: &RunConfig) -> Result<(RewardTable, ClusterAssignment), PipelineError> {
    let path = cfg.artifact("rewards.tsv");
    require(&path, "run rewards first")?;
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(read_reward_file(&text)?)
}

pub fn fit_lm(cfg: &RunConfig) -> Result<NgramModel, PipelineError> {
    let index = load_index(cfg)?;
    let train = load_split(cfg, "train", &index)?;
    let lm = train_ngram(&train, &cfg.ngram)?;
    let path = cfg.artifact("lm.ckpt");
    lm.save(&path)?;
    Ok(lm)
}

pub fn load_or_fit_lm(cfg: &RunConfig) -> Result<NgramModel, PipelineError> {
    let path = cfg.artifact("lm.ckpt");
    if path.exists() {
        Ok(NgramModel::load(&path)?)
    } else {
        fit_lm(cfg)
    }
}

fn remote_config(cfg: &RunConfig) -> Option<RemoteConfig> {
    match &cfg.backend {
        Backend::Ngram => None,
        Backend::Remote { endpoint, timeout_ms, retries } => {
            Some(RemoteConfig { endpoint: endpoint.clone(), timeout_ms: *timeout_ms, retries: *retries })
        }
    }
}

fn policy_name(mode: StateMode) -> &'static str {
    match mode {
        StateMode::Graph => "kg-dqn",
        StateMode::Query => "dqn",
    }
}

pub struct PolicySummary {
    pub best_epoch: usize,
    pub checkpoints: usize,
    pub checkpoint: PathBuf,
}

/// Train a Q-network over the configured proposal backend. The selected
/// checkpoint is copied to `kg-dqn.ckpt` (graph state) or `dqn.ckpt`
/// (query state).
pub fn train_policy(cfg: &RunConfig, mode: StateMode) -> Result<PolicySummary, PipelineError> {
    let index = load_index(cfg)?;
    let train = load_split(cfg, "train", &index)?;
    let (table, clusters) = load_rewards(cfg)?;
    let lm = load_or_fit_lm(cfg)?;
    let remote = remote_config(cfg).map(|config| RemoteModel { config, embedder: lm.clone() });
    let proposer: &dyn ProposalModel = match &remote {
        Some(r) => r,
        None => &lm,
    };
    let name = policy_name(mode);
    let qnet = QNetConfig { state: mode, ..cfg.qnet };
    let env = DqnEnv { lm: proposer, index: &index, table: &table, clusters: &clusters };
    let outcome = train_dqn(&train, &env, &qnet, &cfg.dqn, derive_seed(cfg.seed, name), Some(&cfg.artifact(name)))?;
    let mut log = String::new();
    for line in &outcome.log {
        let _ = writeln!(log, "{line}");
    }
    write_file(&cfg.artifact(&format!("{name}.log")), &log)?;
    let echo = serde_json::to_string(&cfg.dqn).expect("config serializes");
    let checkpoint = cfg.artifact(&format!("{name}.ckpt"));
    outcome.params.save(&checkpoint, &echo)?;
    Ok(PolicySummary { best_epoch: outcome.best_epoch, checkpoints: outcome.checkpoints.len(), checkpoint })
}

/// Reward-shaped fine-tuning of the built-in n-gram model.
pub fn train_tuned(cfg: &RunConfig) -> Result<PolicySummary, PipelineError> {
    if remote_config(cfg).is_some() {
        return Err(PipelineError::Config("fine-tuning is only available for the ngram backend".into()));
    }
    let index = load_index(cfg)?;
    let train = load_split(cfg, "train", &index)?;
    let (table, clusters) = load_rewards(cfg)?;
    let lm = Arc::new(load_or_fit_lm(cfg)?);
    let outcome = train_rsft(
        lm,
        &train,
        &index,
        &table,
        &clusters,
        &cfg.rsft,
        derive_seed(cfg.seed, "rsft"),
        Some(&cfg.artifact("rsft")),
    )?;
    let mut log = String::new();
    for line in &outcome.log {
        let _ = writeln!(log, "{line}");
    }
    write_file(&cfg.artifact("rsft.log"), &log)?;
    let checkpoint = cfg.artifact("rsft.ckpt");
    outcome.model.save(&checkpoint, &cfg.rsft)?;
    Ok(PolicySummary { best_epoch: outcome.best_epoch, checkpoints: outcome.checkpoints.len(), checkpoint })
}

/// Generator names accepted by [`generate_one`] and [`evaluate_models`].
pub const MODEL_NAMES: [&str; 6] = ["kg-dqn", "dqn", "kg-dqn-rs", "ngram", "rsft", "remote"];

/// Loaded artifacts that generators borrow from.
pub struct Workspace {
    pub index: VerbClassIndex,
    pub table: RewardTable,
    pub clusters: ClusterAssignment,
    pub lm: Arc<NgramModel>,
    remote: Option<RemoteModel<NgramModel>>,
    tuned: Option<TunedModel>,
    kg_dqn: Option<QNetworkParams>,
    dqn: Option<QNetworkParams>,
}

impl Workspace {
    /// Load what `models` need; unknown names are a config error.
    pub fn load(cfg: &RunConfig, models: &[String]) -> Result<Self, PipelineError> {
        for m in models {
            if !MODEL_NAMES.contains(&m.as_str()) {
                return Err(PipelineError::Config(format!(
                    "unknown model '{m}' (expected one of {})",
                    MODEL_NAMES.join(", ")
                )));
            }
        }
        let wants = |n: &str| models.iter().any(|m| m == n);
        let index = load_index(cfg)?;
        let (table, clusters) = load_rewards(cfg)?;
        let lm_path = cfg.artifact("lm.ckpt");
        require(&lm_path, "run train first")?;
        let lm = Arc::new(NgramModel::load(&lm_path)?);
        let remote = remote_config(cfg).map(|config| RemoteModel { config, embedder: (*lm).clone() });
        if wants("remote") && remote.is_none() {
            return Err(PipelineError::Config("model 'remote' needs backend.kind = \"remote\"".into()));
        }
        let tuned = if wants("rsft") || wants("kg-dqn-rs") {
            let path = cfg.artifact("rsft.ckpt");
            require(&path, "run train --mode rsft first")?;
            Some(TunedModel::load(&path, lm.clone())?.0)
        } else {
            None
        };
        let load_q = |name: &str| -> Result<Option<QNetworkParams>, PipelineError> {
            let path = cfg.artifact(&format!("{name}.ckpt"));
            require(&path, "run train --mode dqn first")?;
            Ok(Some(QNetworkParams::load(&path)?.0))
        };
        let kg_dqn = if wants("kg-dqn") || wants("kg-dqn-rs") { load_q("kg-dqn")? } else { None };
        let dqn = if wants("dqn") { load_q("dqn")? } else { None };
        Ok(Workspace { index, table, clusters, lm, remote, tuned, kg_dqn, dqn })
    }

    fn proposer(&self) -> &dyn ProposalModel {
        match &self.remote {
            Some(r) => r,
            None => self.lm.as_ref(),
        }
    }

    pub fn eval_model<'a>(&'a self, name: &'a str) -> EvalModel<'a> {
        let policy = |lm: &'a dyn ProposalModel, q: &'a Option<QNetworkParams>| Generator::Policy {
            lm,
            qnet: q.as_ref().expect("loaded"),
            clusters: &self.clusters,
            epsilon: 0.0,
        };
        let tuned = || self.tuned.as_ref().expect("loaded") as &dyn ProposalModel;
        match name {
            "kg-dqn" => EvalModel { name, generator: policy(self.proposer(), &self.kg_dqn), perplexity_model: None },
            "dqn" => EvalModel { name, generator: policy(self.proposer(), &self.dqn), perplexity_model: None },
            "kg-dqn-rs" => EvalModel { name, generator: policy(tuned(), &self.kg_dqn), perplexity_model: None },
            "ngram" => EvalModel {
                name,
                generator: Generator::Sample { lm: self.lm.as_ref() },
                perplexity_model: Some(self.lm.as_ref()),
            },
            "rsft" => EvalModel { name, generator: Generator::Sample { lm: tuned() }, perplexity_model: Some(tuned()) },
            "remote" => EvalModel {
                name,
                generator: Generator::Sample { lm: self.remote.as_ref().expect("checked") },
                perplexity_model: None,
            },
            other => unreachable!("model name {other} validated in load"),
        }
    }
}

/// Generate one story from free text.
pub fn generate_one(
    cfg: &RunConfig,
    model: &str,
    seed_text: &str,
    goal: &VerbClass,
) -> Result<GeneratedStory, PipelineError> {
    let ws = Workspace::load(cfg, &[model.to_string()])?;
    let seed = crate::corpus::annotate_verb_class(&Sentence::new(seed_text), &ws.index);
    if seed.tokens.is_empty() {
        return Err(PipelineError::Config("seed text has no tokens".into()));
    }
    let m = ws.eval_model(model);
    let mut rng = rng_for(cfg.seed, "generate");
    Ok(generate_story(&seed, goal, &m.generator, &ws.index, &cfg.generation, &mut rng)?)
}

/// Story ids from a manifest, one per line.
pub fn read_manifest(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Evaluate `models` on the first sentences of the manifest's stories
/// (default: the test split) and write the report files.
pub fn evaluate_models(
    cfg: &RunConfig,
    models: &[String],
    manifest: Option<&Path>,
) -> Result<EvalReport, PipelineError> {
    let ws = Workspace::load(cfg, models)?;
    let goal = ws.table.goal().clone();
    let test = load_split(cfg, "test", &ws.index)?;
    let train = load_split(cfg, "train", &ws.index)?;
    let ids = match manifest {
        Some(p) => read_manifest(p)?,
        None => test.stories().iter().map(|s| s.id.clone()).collect(),
    };
    let mut seeds = Vec::with_capacity(ids.len());
    for id in &ids {
        let story = test
            .stories()
            .iter()
            .chain(train.stories())
            .find(|s| &s.id == id)
            .ok_or_else(|| PipelineError::Precondition(format!("story '{id}' not found in either split")))?;
        seeds.push(story.sentences[0].clone());
    }
    if seeds.is_empty() {
        return Err(PipelineError::Precondition("no seed stories".into()));
    }
    let heldout: Vec<Vec<String>> = test
        .stories()
        .iter()
        .map(|s| s.sentences.iter().flat_map(|x| x.tokens.iter().cloned()).collect())
        .collect();
    let eval_models: Vec<EvalModel<'_>> = models.iter().map(|m| ws.eval_model(m)).collect();
    let report = evaluate(
        &eval_models,
        &seeds,
        &heldout,
        &goal,
        &ws.index,
        &cfg.generation,
        derive_seed(cfg.seed, "evaluate"),
    )?;
    write_file(&cfg.artifact("report.txt"), &report.to_text())?;
    write_file(&cfg.artifact("report.json"), &report.to_json())?;
    write_file(&cfg.artifact("stories.txt"), &report.story_dump())?;
    Ok(report)
}

/// Tokens of free text, for callers that build seeds by hand.
pub fn seed_tokens(text: &str) -> Vec<String> {
    tokenize(text)
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        PipelineError::Lm(LmError::Checkpoint(e))
    }
}
