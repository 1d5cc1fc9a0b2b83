//! Text format for a precomputed reward table and its clusters.
//!
//! ```text
//! # goalweaver reward table v1
//! goal	discover-84
//! verb_count	12
//! clusters	4
//! omitted	eat-39.1,sleep-40.4
//! class	r1	r2	reward	cluster
//! search-35.2	4.61	-1.02	-0.39	2
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a write/read cycle
//! reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{ClusterAssignment, RewardError, RewardTable};
use crate::corpus::VerbClass;

const HEADER: &str = "# goalweaver reward table v1";

pub fn write_reward_file(table: &RewardTable, clusters: &ClusterAssignment) -> String {
    let mut out = String::new();
    let omitted: Vec<&str> = table.omitted().iter().map(|v| v.as_str()).collect();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "goal\t{}", table.goal());
    let _ = writeln!(out, "verb_count\t{}", table.verb_count());
    let _ = writeln!(out, "clusters\t{}", clusters.k);
    let _ = writeln!(out, "omitted\t{}", omitted.join(","));
    let _ = writeln!(out, "class\tr1\tr2\treward\tcluster");
    for (v, r) in table.rewards() {
        let cluster = clusters.cluster(v).map_or("-".to_string(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{v}\t{}\t{}\t{r}\t{cluster}",
            table.r1(v).unwrap_or(f64::NAN),
            table.r2(v).unwrap_or(f64::NAN)
        );
    }
    out
}

fn parse_err(line: usize, reason: impl Into<String>) -> RewardError {
    RewardError::Parse { line, reason: reason.into() }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, RewardError> {
    s.parse::<f64>().map_err(|_| parse_err(line, format!("bad number '{s}'")))
}

pub fn read_reward_file(text: &str) -> Result<(RewardTable, ClusterAssignment), RewardError> {
    let mut header: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut rows: Vec<(VerbClass, f64, f64, f64, Option<usize>, usize)> = Vec::new();
    let mut in_rows = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if !in_rows {
            if cols[0] == "class" {
                in_rows = true;
                continue;
            }
            if cols.len() != 2 {
                return Err(parse_err(line_no, "expected 'key<TAB>value'"));
            }
            header.insert(cols[0], (line_no, cols[1]));
            continue;
        }
        if cols.len() != 5 {
            return Err(parse_err(line_no, "expected 5 columns"));
        }
        let cluster = match cols[4] {
            "-" => None,
            c => Some(c.parse::<usize>().map_err(|_| parse_err(line_no, "bad cluster index"))?),
        };
        rows.push((
            VerbClass::new(cols[0]),
            parse_f64(cols[1], line_no)?,
            parse_f64(cols[2], line_no)?,
            parse_f64(cols[3], line_no)?,
            cluster,
            line_no,
        ));
    }
    let get = |key: &str| header.get(key).copied().ok_or_else(|| parse_err(0, format!("missing '{key}'")));
    let goal = VerbClass::new(get("goal")?.1);
    let (vc_line, vc) = get("verb_count")?;
    let verb_count: usize = vc.parse().map_err(|_| parse_err(vc_line, "bad verb_count"))?;
    let (k_line, k) = get("clusters")?;
    let k: usize = k.parse().map_err(|_| parse_err(k_line, "bad cluster count"))?;
    let omitted: Vec<VerbClass> = get("omitted")?
        .1
        .split(',')
        .filter(|s| !s.is_empty())
        .map(VerbClass::new)
        .collect();

    let table = RewardTable::from_components(
        goal.clone(),
        verb_count,
        rows.iter().map(|(v, r1, r2, ..)| (v.clone(), *r1, *r2)),
        omitted,
    );
    let mut labels = BTreeMap::new();
    for (v, _, _, r, cluster, line) in &rows {
        if table.reward(v).map(f64::to_bits) != Some(r.to_bits()) {
            return Err(parse_err(*line, format!("reward for {v} inconsistent with r1*r2/verb_count")));
        }
        if let Some(c) = cluster {
            if *c >= k {
                return Err(parse_err(*line, format!("cluster {c} out of range for k={k}")));
            }
            labels.insert(v.clone(), *c);
        }
    }
    let mut clusters = ClusterAssignment::from_labels(table.rewards(), labels, Some(goal));
    clusters.k = k;
    clusters.means.resize(k, f64::NAN);
    Ok((table, clusters))
}
