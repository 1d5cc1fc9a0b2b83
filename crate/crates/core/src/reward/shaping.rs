use serde::{Deserialize, Serialize};

use super::{ClusterAssignment, RewardError, RewardTable};
use crate::corpus::VerbClass;

/// Cluster index of `target` minus cluster index of `source`; positive means
/// movement toward the goal.
pub fn cluster_delta(source: &VerbClass, target: &VerbClass, clusters: &ClusterAssignment) -> Result<i64, RewardError> {
    let s = clusters.cluster(source).ok_or_else(|| RewardError::Unclustered(source.clone()))?;
    let t = clusters.cluster(target).ok_or_else(|| RewardError::Unclustered(target.clone()))?;
    Ok(t as i64 - s as i64)
}

fn discount(reward: f64, delta: i64) -> f64 {
    match delta {
        0 | 1 => reward,
        d if d > 1 => reward / d as f64,
        _ => 0.0,
    }
}

/// Cluster-delta reward rules: a step of zero or one cluster earns the full
/// `R(candidate)`, a longer forward jump earns `R / delta`, anything else
/// earns nothing. Classes missing from the table or clusters earn 0.
pub fn shaped_reward(
    candidate: &VerbClass,
    source: &VerbClass,
    table: &RewardTable,
    clusters: &ClusterAssignment,
) -> f64 {
    ShapedReward::new(table, clusters, RewardTransform::Identity).reward(candidate, Some(source))
}

/// Monotone map applied to `R(v)` before the cluster rules.
///
/// `R` from the table is non-positive with the goal at 0, so a literal
/// reward penalizes forward moves relative to the zero reward given to
/// backward ones. `Exp` maps `R` into `(0, 1]` preserving order, which is
/// what the RL trainers use by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardTransform {
    Identity,
    #[default]
    Exp,
}

impl RewardTransform {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            RewardTransform::Identity => r,
            RewardTransform::Exp => r.exp(),
        }
    }
}

/// Table + clusters + transform bundled for use inside training loops.
#[derive(Debug, Clone, Copy)]
pub struct ShapedReward<'a> {
    pub table: &'a RewardTable,
    pub clusters: &'a ClusterAssignment,
    pub transform: RewardTransform,
}

impl<'a> ShapedReward<'a> {
    pub fn new(table: &'a RewardTable, clusters: &'a ClusterAssignment, transform: RewardTransform) -> Self {
        ShapedReward { table, clusters, transform }
    }

    /// Reward for moving from `source` to a sentence of class `candidate`.
    /// Without a clustered source there is no delta and the reward is 0.
    pub fn reward(&self, candidate: &VerbClass, source: Option<&VerbClass>) -> f64 {
        let Some(source) = source else { return 0.0 };
        let Some(r) = self.table.reward(candidate) else {
            log::debug!("no reward entry for {candidate}; shaped reward 0");
            return 0.0;
        };
        match cluster_delta(source, candidate, self.clusters) {
            Ok(delta) => discount(self.transform.apply(r), delta),
            Err(e) => {
                log::debug!("{e}; shaped reward 0");
                0.0
            }
        }
    }

    pub fn delta(&self, candidate: &VerbClass, source: Option<&VerbClass>) -> Option<i64> {
        cluster_delta(source?, candidate, self.clusters).ok()
    }
}
