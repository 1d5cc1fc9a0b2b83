//! Exact one-dimensional natural-breaks clustering (Fisher–Jenks).
//!
//! The dynamic program runs over *distinct* sorted values weighted by their
//! multiplicity, so equal values always share a cluster and cluster means are
//! strictly increasing with cluster index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{RewardError, RewardTable};
use crate::corpus::VerbClass;

/// Goodness-of-variance-fit threshold used when the cluster count is chosen
/// automatically.
pub const DEFAULT_GVF_THRESHOLD: f64 = 0.8;

/// Weighted sum of squared deviations of `values` about their weighted mean.
fn weighted_ssd(values: &[(f64, usize)]) -> f64 {
    let n: usize = values.iter().map(|v| v.1).sum();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().map(|&(x, w)| x * w as f64).sum::<f64>() / n as f64;
    values.iter().map(|&(x, w)| w as f64 * (x - mean).powi(2)).sum()
}

/// Within-cluster sum of squared deviations for an explicit partition.
pub fn within_cluster_ssd(clusters: &[Vec<f64>]) -> f64 {
    clusters
        .iter()
        .map(|c| {
            let pairs: Vec<(f64, usize)> = c.iter().map(|&x| (x, 1)).collect();
            weighted_ssd(&pairs)
        })
        .sum()
}

fn distinct_weighted(values: &[f64]) -> Vec<(f64, usize)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, usize)> = Vec::new();
    for x in sorted {
        match out.last_mut() {
            Some((last, w)) if *last == x => *w += 1,
            _ => out.push((x, 1)),
        }
    }
    out
}

/// Optimal partition of `values` into `k` contiguous groups of distinct
/// values. Returns, for each input value, its cluster index (ascending).
pub fn jenks_partition(values: &[f64], k: usize) -> Result<Vec<usize>, RewardError> {
    if k == 0 {
        return Err(RewardError::ZeroClusters);
    }
    let distinct = distinct_weighted(values);
    let m = distinct.len();
    if k > m {
        return Err(RewardError::TooManyClusters { k, distinct: m });
    }
    // cost[i][j]: weighted SSD of distinct[i..=j], built incrementally
    // (weighted Welford) for each start i.
    let mut cost = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        let (mut w_sum, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
        for j in i..m {
            let (x, w) = distinct[j];
            let w = w as f64;
            w_sum += w;
            let delta = x - mean;
            mean += delta * w / w_sum;
            m2 += w * delta * (x - mean);
            cost[i][j] = m2.max(0.0);
        }
    }
    // best[c][j]: minimal cost of covering distinct[0..=j] with c+1 clusters;
    // start[c][j]: index where the last of those clusters begins.
    let mut best = vec![vec![f64::INFINITY; m]; k];
    let mut start = vec![vec![0usize; m]; k];
    for j in 0..m {
        best[0][j] = cost[0][j];
    }
    for c in 1..k {
        for j in c..m {
            for i in c..=j {
                let candidate = best[c - 1][i - 1] + cost[i][j];
                if candidate < best[c][j] {
                    best[c][j] = candidate;
                    start[c][j] = i;
                }
            }
        }
    }
    let mut label_of_distinct = vec![0usize; m];
    let mut end = m;
    for c in (0..k).rev() {
        let begin = if c == 0 { 0 } else { start[c][end - 1] };
        for label in &mut label_of_distinct[begin..end] {
            *label = c;
        }
        end = begin;
    }
    Ok(values
        .iter()
        .map(|x| {
            let pos = distinct.partition_point(|(d, _)| d.total_cmp(x).is_lt());
            label_of_distinct[pos]
        })
        .collect())
}

/// `1 − SDCM / SDAM`; 1 for a constant input.
pub fn goodness_of_variance_fit(values: &[f64], labels: &[usize]) -> f64 {
    let pairs: Vec<(f64, usize)> = values.iter().map(|&x| (x, 1)).collect();
    let total = weighted_ssd(&pairs);
    if total == 0.0 {
        return 1.0;
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (&x, &l) in values.iter().zip(labels) {
        groups[l].push(x);
    }
    1.0 - within_cluster_ssd(&groups) / total
}

/// Smallest `k` whose optimal partition reaches `threshold` GVF.
pub fn auto_cluster_count(values: &[f64], threshold: f64) -> Result<usize, RewardError> {
    let m = distinct_weighted(values).len();
    if m == 0 {
        return Err(RewardError::TooManyClusters { k: 1, distinct: 0 });
    }
    for k in 1..=m {
        let labels = jenks_partition(values, k)?;
        if goodness_of_variance_fit(values, &labels) >= threshold {
            return Ok(k);
        }
    }
    Ok(m)
}

/// Ordered verb clusters: higher index = higher reward = closer to the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub cluster_of: BTreeMap<VerbClass, usize>,
    /// Mean value per cluster, strictly increasing.
    pub means: Vec<f64>,
    pub goal: Option<VerbClass>,
    pub goal_cluster: Option<usize>,
}

impl ClusterAssignment {
    pub fn cluster(&self, v: &VerbClass) -> Option<usize> {
        self.cluster_of.get(v).copied()
    }

    pub fn top_cluster(&self) -> usize {
        self.k - 1
    }

    /// Cluster the reward values of `table`; `k = None` picks the smallest
    /// count reaching [`DEFAULT_GVF_THRESHOLD`].
    pub fn for_table(table: &RewardTable, k: Option<usize>) -> Result<Self, RewardError> {
        let values: Vec<f64> = table.rewards().values().copied().collect();
        let k = match k {
            Some(k) => k,
            None => auto_cluster_count(&values, DEFAULT_GVF_THRESHOLD)?,
        };
        let mut clusters = jenks_cluster(table.rewards(), k)?;
        clusters.goal_cluster = clusters.cluster(table.goal());
        clusters.goal = Some(table.goal().clone());
        Ok(clusters)
    }

    /// Rebuild from explicit labels (for example after loading from disk).
    pub fn from_labels(
        values: &BTreeMap<VerbClass, f64>,
        labels: BTreeMap<VerbClass, usize>,
        goal: Option<VerbClass>,
    ) -> Self {
        let k = labels.values().copied().max().map_or(0, |m| m + 1);
        let mut sums = vec![(0.0f64, 0usize); k];
        for (v, &l) in &labels {
            if let Some(x) = values.get(v) {
                sums[l].0 += x;
                sums[l].1 += 1;
            }
        }
        let means = sums.iter().map(|(s, n)| if *n == 0 { f64::NAN } else { s / *n as f64 }).collect();
        let goal_cluster = goal.as_ref().and_then(|g| labels.get(g).copied());
        ClusterAssignment { k, cluster_of: labels, means, goal, goal_cluster }
    }
}

/// Natural-breaks clustering of per-class values into `k` ordered clusters.
pub fn jenks_cluster(values: &BTreeMap<VerbClass, f64>, k: usize) -> Result<ClusterAssignment, RewardError> {
    if let Some((v, _)) = values.iter().find(|(_, x)| !x.is_finite()) {
        return Err(RewardError::NonFinite(v.clone()));
    }
    let xs: Vec<f64> = values.values().copied().collect();
    let labels = jenks_partition(&xs, k)?;
    let labels: BTreeMap<VerbClass, usize> = values.keys().cloned().zip(labels).collect();
    Ok(ClusterAssignment::from_labels(values, labels, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(xs: &[f64]) -> BTreeMap<VerbClass, f64> {
        xs.iter().enumerate().map(|(i, &x)| (VerbClass::new(format!("c{i:02}")), x)).collect()
    }

    #[test]
    fn two_obvious_groups() {
        let labels = jenks_partition(&[1.0, 2.0, 3.0, 10.0, 11.0, 12.0], 2).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
        let labels = jenks_partition(&[12.0, 1.0, 11.0, 2.0, 10.0, 3.0], 2).unwrap();
        assert_eq!(labels, vec![1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn constant_values_single_cluster() {
        let c = jenks_cluster(&map(&[4.0, 4.0, 4.0]), 1).unwrap();
        assert_eq!(c.k, 1);
        assert!(c.cluster_of.values().all(|&l| l == 0));
        assert_eq!(within_cluster_ssd(&[vec![4.0, 4.0, 4.0]]), 0.0);
        assert!(matches!(
            jenks_cluster(&map(&[4.0, 4.0, 4.0]), 2),
            Err(RewardError::TooManyClusters { k: 2, distinct: 1 })
        ));
    }

    #[test]
    fn singletons_when_k_equals_distinct() {
        let xs = [0.5, -1.0, 3.0, 2.0];
        let labels = jenks_partition(&xs, 4).unwrap();
        assert_eq!(labels, vec![1, 0, 3, 2]);
        assert_eq!(goodness_of_variance_fit(&xs, &labels), 1.0);
    }

    #[test]
    fn equal_values_share_a_cluster() {
        let c = jenks_cluster(&map(&[1.0, 1.0, 5.0, 5.0, 9.0]), 3).unwrap();
        assert_eq!(c.cluster_of.values().copied().collect::<Vec<_>>(), vec![0, 0, 1, 1, 2]);
        assert!(c.means.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_k_rejected() {
        assert_eq!(jenks_partition(&[1.0], 0), Err(RewardError::ZeroClusters));
    }

    #[test]
    fn auto_k_reaches_threshold() {
        let xs = [1.0, 1.1, 1.2, 5.0, 5.1, 9.0, 9.2];
        let k = auto_cluster_count(&xs, 0.8).unwrap();
        let labels = jenks_partition(&xs, k).unwrap();
        assert!(goodness_of_variance_fit(&xs, &labels) >= 0.8);
        if k > 1 {
            let fewer = jenks_partition(&xs, k - 1).unwrap();
            assert!(goodness_of_variance_fit(&xs, &fewer) < 0.8);
        }
        assert_eq!(auto_cluster_count(&[2.0, 2.0], 0.8).unwrap(), 1);
    }
}
