//! Story generation protocol and automated metrics.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sentence, VerbClass, VerbClassIndex};
use crate::kg::{extract_triples, KnowledgeGraph};
use crate::lm::{clean_candidates, Candidate, LmError, ProposalModel, SamplingParams};
use crate::policy::{select_action, PolicyError, QNetworkParams, StateInput};
use crate::reward::ClusterAssignment;
use crate::seed::{rng_for, SeededRng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("seed sentence has no tokens")]
    EmptySeed,
    #[error("no stories to score")]
    NoStories,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl EvalError {
    /// True when the failure came from an external generation service.
    pub fn is_external(&self) -> bool {
        matches!(self, EvalError::Lm(LmError::Remote(_)) | EvalError::Policy(PolicyError::Lm(LmError::Remote(_))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Raw continuations per step for policy-driven generation.
    pub breadth: usize,
    /// Raw continuations per step for plain sampling; the first valid one is
    /// taken.
    pub sample_breadth: usize,
    pub max_continuations: usize,
    pub top_k: usize,
    pub max_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { breadth: 25, sample_breadth: 1, max_continuations: 15, top_k: 1000, max_tokens: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCause {
    GoalReached,
    NoValidCandidates,
    LengthLimit,
}

impl fmt::Display for TerminalCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminalCause::GoalReached => "goal_reached",
            TerminalCause::NoValidCandidates => "no_valid_candidates",
            TerminalCause::LengthLimit => "length_limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedStory {
    pub seed: Sentence,
    pub continuations: Vec<Candidate>,
    pub cause: TerminalCause,
    pub graph: KnowledgeGraph,
}

impl GeneratedStory {
    /// Sentence count including the seed.
    pub fn len(&self) -> usize {
        1 + self.continuations.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn reached_goal(&self) -> bool {
        self.cause == TerminalCause::GoalReached
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.seed
            .tokens
            .iter()
            .chain(self.continuations.iter().flat_map(|c| c.tokens.iter()))
            .map(String::as_str)
            .collect()
    }

    pub fn sentences(&self) -> Vec<&str> {
        std::iter::once(self.seed.text.as_str()).chain(self.continuations.iter().map(|c| c.text.as_str())).collect()
    }
}

/// How continuations are chosen.
#[derive(Clone, Copy)]
pub enum Generator<'a> {
    /// Q-network choice among cleaned candidates.
    Policy {
        lm: &'a dyn ProposalModel,
        qnet: &'a QNetworkParams,
        clusters: &'a ClusterAssignment,
        epsilon: f64,
    },
    /// First valid sample from the language model.
    Sample { lm: &'a dyn ProposalModel },
}

impl Generator<'_> {
    fn lm(&self) -> &dyn ProposalModel {
        match self {
            Generator::Policy { lm, .. } | Generator::Sample { lm } => *lm,
        }
    }
}

/// Generate continuations of `seed` until the goal class appears, no valid
/// candidate remains, or `max_continuations` sentences have been added. The
/// seed's own class does not count toward the goal.
pub fn generate_story(
    seed: &Sentence,
    goal: &VerbClass,
    generator: &Generator<'_>,
    index: &VerbClassIndex,
    config: &GenerationConfig,
    rng: &mut SeededRng,
) -> Result<GeneratedStory, EvalError> {
    if seed.tokens.is_empty() {
        return Err(EvalError::EmptySeed);
    }
    let lm = generator.lm();
    let params = SamplingParams { top_k: config.top_k, max_tokens: config.max_tokens };
    let mut graph = KnowledgeGraph::new().update(&extract_triples(seed));
    let mut history: Vec<String> = seed.tokens.clone();
    let mut query: Vec<String> = seed.tokens.clone();
    let mut source: Option<VerbClass> = None;
    if let Generator::Policy { clusters, .. } = generator {
        source = seed.verb_class().filter(|c| clusters.cluster(c).is_some()).cloned();
    }
    let mut continuations: Vec<Candidate> = Vec::new();
    let cause = loop {
        if continuations.len() >= config.max_continuations {
            break TerminalCause::LengthLimit;
        }
        let breadth = match generator {
            Generator::Policy { .. } => config.breadth,
            Generator::Sample { .. } => config.sample_breadth,
        };
        let raw = lm.generate(&history, breadth, &params, rng)?;
        let candidates = clean_candidates(&raw, index, config.max_tokens);
        if candidates.is_empty() {
            break TerminalCause::NoValidCandidates;
        }
        let chosen = match generator {
            Generator::Sample { .. } => 0,
            Generator::Policy { qnet, clusters, epsilon, .. } => {
                let state = StateInput::build(qnet.config.state, &graph, &query, lm);
                select_action(&candidates, &state, qnet, *epsilon, clusters, source.as_ref(), lm, rng)?
            }
        };
        let action = candidates[chosen].clone();
        graph = graph.update(&extract_triples(&action.to_sentence()));
        history.extend(action.tokens.iter().cloned());
        query = action.tokens.clone();
        if let Generator::Policy { clusters, .. } = generator {
            if clusters.cluster(action.verb_class()).is_some() {
                source = Some(action.verb_class().clone());
            }
        }
        let done = action.verb_class() == goal;
        continuations.push(action);
        if done {
            break TerminalCause::GoalReached;
        }
    };
    Ok(GeneratedStory { seed: seed.clone(), continuations, cause, graph })
}

pub fn goal_rate(stories: &[GeneratedStory]) -> Result<f64, EvalError> {
    if stories.is_empty() {
        return Err(EvalError::NoStories);
    }
    Ok(stories.iter().filter(|s| s.reached_goal()).count() as f64 / stories.len() as f64)
}

fn has_repeated_4gram(tokens: &[&str]) -> bool {
    let mut seen: HashMap<&[&str], ()> = HashMap::new();
    tokens.windows(4).any(|w| seen.insert(w, ()).is_some())
}

/// Fraction of stories with some token 4-gram occurring at least twice,
/// counted over the seed and continuations concatenated.
pub fn rep4(stories: &[GeneratedStory]) -> Result<f64, EvalError> {
    if stories.is_empty() {
        return Err(EvalError::NoStories);
    }
    Ok(stories.iter().filter(|s| has_repeated_4gram(&s.tokens())).count() as f64 / stories.len() as f64)
}

/// Mean sentence count over goal-reaching stories; `None` if there are none.
pub fn avg_length(stories: &[GeneratedStory]) -> Option<f64> {
    let lens: Vec<usize> = stories.iter().filter(|s| s.reached_goal()).map(GeneratedStory::len).collect();
    if lens.is_empty() {
        None
    } else {
        Some(lens.iter().sum::<usize>() as f64 / lens.len() as f64)
    }
}

/// A named generator to evaluate. `perplexity_model` is set for built-in
/// models that can score text.
#[derive(Clone, Copy)]
pub struct EvalModel<'a> {
    pub name: &'a str,
    pub generator: Generator<'a>,
    pub perplexity_model: Option<&'a dyn ProposalModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub stories: usize,
    pub failures: usize,
    pub goal_rate: f64,
    pub avg_length: Option<f64>,
    pub rep4: f64,
    pub perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub goal: VerbClass,
    pub seeds: usize,
    pub master_seed: u64,
    pub models: Vec<ModelMetrics>,
    #[serde(skip)]
    pub stories: Vec<(String, Vec<GeneratedStory>)>,
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| v.to_string())
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# goalweaver evaluation report");
        let _ = writeln!(out, "goal\t{}", self.goal);
        let _ = writeln!(out, "seeds\t{}", self.seeds);
        let _ = writeln!(out, "master_seed\t{}", self.master_seed);
        for m in &self.models {
            let _ = writeln!(out, "[{}]", m.model);
            let _ = writeln!(out, "stories\t{}", m.stories);
            let _ = writeln!(out, "failures\t{}", m.failures);
            let _ = writeln!(out, "goal_rate\t{}", m.goal_rate);
            let _ = writeln!(out, "avg_length\t{}", opt(m.avg_length));
            let _ = writeln!(out, "rep4\t{}", m.rep4);
            let _ = writeln!(out, "perplexity\t{}", opt(m.perplexity));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text dump, one story per blank-line separated block.
    pub fn story_dump(&self) -> String {
        let mut out = String::new();
        for (model, stories) in &self.stories {
            for (i, s) in stories.iter().enumerate() {
                let _ = writeln!(out, "# model: {model} seed: {i} cause: {} length: {}", s.cause, s.len());
                for line in s.sentences() {
                    let _ = writeln!(out, "{line}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Corpus-level perplexity `exp(−Σ ln P / Σ N)` over `texts`.
pub fn corpus_perplexity(model: &dyn ProposalModel, texts: &[Vec<String>]) -> Option<f64> {
    let mut lp = 0.0;
    let mut n = 0usize;
    for t in texts.iter().filter(|t| !t.is_empty()) {
        lp += model.sequence_logprob(t)?;
        n += t.len();
    }
    (n > 0).then(|| (-lp / n as f64).exp())
}

/// One story per (model, seed) with per-seed random streams derived from
/// `master_seed`; metrics per model in input order.
pub fn evaluate(
    models: &[EvalModel<'_>],
    seeds: &[Sentence],
    heldout: &[Vec<String>],
    goal: &VerbClass,
    index: &VerbClassIndex,
    config: &GenerationConfig,
    master_seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::with_capacity(models.len());
    let mut dumps = Vec::with_capacity(models.len());
    for m in models {
        let mut stories = Vec::with_capacity(seeds.len());
        let mut failures = 0;
        for (i, seed) in seeds.iter().enumerate() {
            let mut rng = rng_for(master_seed, &format!("eval/{}/{i}", m.name));
            match generate_story(seed, goal, &m.generator, index, config, &mut rng) {
                Ok(s) => stories.push(s),
                Err(e) if e.is_external() => return Err(e),
                Err(e) => {
                    log::warn!("model {} seed {i}: {e}; excluded", m.name);
                    failures += 1;
                }
            }
        }
        let (gr, r4) = if stories.is_empty() { (0.0, 0.0) } else { (goal_rate(&stories)?, rep4(&stories)?) };
        rows.push(ModelMetrics {
            model: m.name.to_string(),
            stories: stories.len(),
            failures,
            goal_rate: gr,
            avg_length: avg_length(&stories),
            rep4: r4,
            perplexity: m.perplexity_model.and_then(|pm| corpus_perplexity(pm, heldout)),
        });
        dumps.push((m.name.to_string(), stories));
    }
    Ok(EvalReport { goal: goal.clone(), seeds: seeds.len(), master_seed, models: rows, stories: dumps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VerbMatch;

    fn cand(text: &str, class: &str) -> Candidate {
        let s = Sentence::new(text);
        Candidate { index: 0, text: s.text, tokens: s.tokens, verb: VerbMatch { position: 0, lemma: "x".into(), class: class.into() } }
    }

    fn story(seed: &str, conts: &[(&str, &str)], cause: TerminalCause) -> GeneratedStory {
        GeneratedStory {
            seed: Sentence::new(seed),
            continuations: conts.iter().map(|(t, c)| cand(t, c)).collect(),
            cause,
            graph: KnowledgeGraph::new(),
        }
    }

    #[test]
    fn rep4_detects_repeats_across_sentences() {
        let rep = story("the red dog ran", &[("the red dog ran", "a")], TerminalCause::LengthLimit);
        let short = story("a b c d", &[], TerminalCause::LengthLimit);
        assert_eq!(rep4(&[rep.clone()]).unwrap(), 1.0);
        assert_eq!(rep4(&[short.clone()]).unwrap(), 0.0);
        assert_eq!(rep4(&[rep, short]).unwrap(), 0.5);
        assert!(matches!(rep4(&[]), Err(EvalError::NoStories)));
    }

    #[test]
    fn length_only_counts_goal_stories() {
        let g4 = story("s", &[("a", "x"), ("b", "x"), ("c", "g")], TerminalCause::GoalReached);
        let g6 = story("s", &[("a", "x"), ("b", "x"), ("c", "x"), ("d", "x"), ("e", "g")], TerminalCause::GoalReached);
        let miss = story("s", &vec![("a", "x"); 15], TerminalCause::LengthLimit);
        assert_eq!(avg_length(&[g4.clone(), g6.clone(), miss.clone()]), Some(5.0));
        assert_eq!(avg_length(&[miss.clone()]), None);
        assert!((goal_rate(&[g4, g6, miss]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }
}
