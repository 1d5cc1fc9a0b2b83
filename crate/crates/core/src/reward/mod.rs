//! Precomputed reward shaping over verb classes.
//!
//! For a goal class `g` and every class `v` that shares at least one story
//! with it, the table stores
//!
//! * `r1(v) = ln Σ_{s ∈ S(v,g)} (len(s) − dist_s(v, g))`, a proximity term,
//! * `r2(v) = ln(count(v, g) / count(v))`, a co-occurrence term,
//! * `R(v) = r1(v) · r2(v) / |verbs|`.
//!
//! `S(v,g)` is the set of stories containing both classes, `len` counts
//! sentences, and `dist_s` is the smallest sentence gap between any
//! occurrence of `v` and any occurrence of `g`. Logs are natural.
//!
//! `r1 ≥ 0` and `r2 ≤ 0`, so `R` is non-positive and the goal itself scores
//! exactly 0, the maximum. Consumers that want positive rewards should apply a
//! [`RewardTransform`].

mod io;
mod jenks;
mod shaping;

pub use io::{read_reward_file, write_reward_file};
pub use jenks::{
    auto_cluster_count, goodness_of_variance_fit, jenks_cluster, jenks_partition, within_cluster_ssd,
    ClusterAssignment, DEFAULT_GVF_THRESHOLD,
};
pub use shaping::{cluster_delta, shaped_reward, RewardTransform, ShapedReward};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Story, VerbClass};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("goal never observed: {0}")]
    GoalNeverObserved(VerbClass),
    #[error("cannot form {k} clusters from {distinct} distinct values")]
    TooManyClusters { k: usize, distinct: usize },
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("non-finite reward value for {0}")]
    NonFinite(VerbClass),
    #[error("verb class {0} is not clustered")]
    Unclustered(VerbClass),
    #[error("reward file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn min_gap(a: &[usize], b: &[usize]) -> usize {
    let mut best = usize::MAX;
    for &i in a {
        for &j in b {
            best = best.min(i.abs_diff(j));
        }
    }
    best
}

fn proximity_sum(stories: &[Story], v: &VerbClass, g: &VerbClass) -> Option<usize> {
    let mut total = 0usize;
    let mut any = false;
    for story in stories {
        let positions = story.class_positions();
        if let (Some(pv), Some(pg)) = (positions.get(v), positions.get(g)) {
            any = true;
            total += story.len() - min_gap(pv, pg);
        }
    }
    any.then_some(total)
}

/// Proximity component; `None` when no story contains both classes.
pub fn compute_r1(v: &VerbClass, g: &VerbClass, corpus: &Corpus) -> Option<f64> {
    proximity_sum(corpus.stories(), v, g).map(|s| (s as f64).ln())
}

/// Co-occurrence component; `None` when `count(v) = 0`. Returns negative
/// infinity when `v` is observed but never alongside `g`.
pub fn compute_r2(v: &VerbClass, g: &VerbClass, corpus: &Corpus) -> Option<f64> {
    let stats = corpus.stats();
    let cv = stats.count(v);
    if cv == 0 {
        return None;
    }
    Some((stats.count_both(v, g) as f64 / cv as f64).ln())
}

/// Per-class shaped rewards toward one goal class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    goal: VerbClass,
    verb_count: usize,
    rewards: BTreeMap<VerbClass, f64>,
    r1: BTreeMap<VerbClass, f64>,
    r2: BTreeMap<VerbClass, f64>,
    /// Classes observed in the corpus but never alongside the goal.
    omitted: Vec<VerbClass>,
}

impl RewardTable {
    /// Build from explicit components; `R` is derived as `r1 · r2 / verb_count`.
    pub fn from_components(
        goal: VerbClass,
        verb_count: usize,
        components: impl IntoIterator<Item = (VerbClass, f64, f64)>,
        omitted: Vec<VerbClass>,
    ) -> Self {
        let mut table = RewardTable {
            goal,
            verb_count,
            rewards: BTreeMap::new(),
            r1: BTreeMap::new(),
            r2: BTreeMap::new(),
            omitted,
        };
        for (v, r1, r2) in components {
            table.rewards.insert(v.clone(), combine(r1, r2, verb_count));
            table.r1.insert(v.clone(), r1);
            table.r2.insert(v, r2);
        }
        table
    }

    pub fn goal(&self) -> &VerbClass {
        &self.goal
    }

    pub fn verb_count(&self) -> usize {
        self.verb_count
    }

    pub fn reward(&self, v: &VerbClass) -> Option<f64> {
        self.rewards.get(v).copied()
    }

    pub fn r1(&self, v: &VerbClass) -> Option<f64> {
        self.r1.get(v).copied()
    }

    pub fn r2(&self, v: &VerbClass) -> Option<f64> {
        self.r2.get(v).copied()
    }

    pub fn rewards(&self) -> &BTreeMap<VerbClass, f64> {
        &self.rewards
    }

    pub fn omitted(&self) -> &[VerbClass] {
        &self.omitted
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn combine(r1: f64, r2: f64, verb_count: usize) -> f64 {
    // `+ 0.0` folds a negative zero into positive zero.
    (1.0 / verb_count as f64) * r1 * r2 + 0.0
}

/// Compute the reward table for `goal` over every class in `corpus`.
pub fn compute_reward_table(corpus: &Corpus, goal: &VerbClass) -> Result<RewardTable, RewardError> {
    let stats = corpus.stats();
    if stats.count(goal) == 0 {
        return Err(RewardError::GoalNeverObserved(goal.clone()));
    }
    // One pass over the stories collecting per-class proximity sums.
    let mut sums: BTreeMap<&VerbClass, usize> = BTreeMap::new();
    for story in corpus.stories() {
        let positions = story.class_positions();
        let Some(pg) = positions.get(goal) else { continue };
        for (v, pv) in &positions {
            *sums.entry(*v).or_default() += story.len() - min_gap(pv, pg);
        }
    }
    let mut components = Vec::new();
    let mut omitted = Vec::new();
    for v in stats.classes() {
        match sums.get(v) {
            Some(&sum) => {
                let r1 = (sum as f64).ln();
                let r2 = (stats.count_both(v, goal) as f64 / stats.count(v) as f64).ln();
                components.push((v.clone(), r1, r2));
            }
            None => omitted.push(v.clone()),
        }
    }
    Ok(RewardTable::from_components(goal.clone(), stats.distinct_classes(), components, omitted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentence, VerbMatch};

    /// Story whose sentences carry the given classes (`None` = no verb).
    pub(crate) fn story(id: &str, classes: &[Option<&str>]) -> Story {
        Story {
            id: id.into(),
            sentences: classes
                .iter()
                .map(|c| {
                    let mut s = Sentence::new("x .");
                    s.verb = c.map(|c| VerbMatch { position: 0, lemma: "x".into(), class: c.into() });
                    s
                })
                .collect(),
        }
    }

    #[test]
    fn r1_single_story() {
        let c = Corpus::new(vec![story("s", &[Some("v"), None, None, Some("g"), None])]);
        let r1 = compute_r1(&"v".into(), &"g".into(), &c).unwrap();
        assert!((r1 - 2f64.ln()).abs() < 1e-15);
        assert!((r1 - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn r1_same_sentence_and_undefined() {
        let c = Corpus::new(vec![story("s", &[Some("g"), None, None, None])]);
        assert_eq!(compute_r1(&"g".into(), &"g".into(), &c), Some(4f64.ln()));
        assert_eq!(compute_r1(&"v".into(), &"g".into(), &c), None);
    }

    #[test]
    fn r2_examples() {
        let c = Corpus::new(vec![
            story("a", &[Some("v"), Some("g")]),
            story("b", &[Some("v")]),
            story("c", &[Some("w"), Some("g")]),
        ]);
        let r2 = compute_r2(&"v".into(), &"g".into(), &c).unwrap();
        assert!((r2 - 0.5f64.ln()).abs() < 1e-15);
        assert!((r2 + 0.6931).abs() < 1e-4);
        assert_eq!(compute_r2(&"w".into(), &"g".into(), &c), Some(0.0));
        assert_eq!(compute_r2(&"missing".into(), &"g".into(), &c), None);
    }

    #[test]
    fn table_covers_only_goal_cooccurring_classes() {
        let c = Corpus::new(vec![
            story("a", &[Some("v"), Some("x"), Some("g")]),
            story("b", &[Some("w")]),
        ]);
        let t = compute_reward_table(&c, &"g".into()).unwrap();
        let keys: Vec<&str> = t.rewards().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, ["g", "v", "x"]);
        assert_eq!(t.omitted(), &[VerbClass::from("w")]);
        assert_eq!(t.verb_count(), 4);
        assert_eq!(t.reward(&"g".into()), Some(0.0));
    }

    #[test]
    fn goal_absent() {
        let c = Corpus::new(vec![story("a", &[Some("v")])]);
        assert_eq!(
            compute_reward_table(&c, &"discover-84".into()),
            Err(RewardError::GoalNeverObserved("discover-84".into()))
        );
    }

    #[test]
    fn reward_is_product_over_verb_count() {
        let c = Corpus::new(vec![
            story("a", &[Some("v"), None, Some("g")]),
            story("b", &[Some("v")]),
            story("c", &[Some("g")]),
        ]);
        let t = compute_reward_table(&c, &"g".into()).unwrap();
        for v in t.rewards().keys() {
            let expect = t.r1(v).unwrap() * t.r2(v).unwrap() / t.verb_count() as f64;
            assert_eq!(t.reward(v).unwrap(), expect + 0.0);
        }
    }
}
