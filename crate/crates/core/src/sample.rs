//! Stage II selection: equal per-cluster quotas, centroid-prioritized top-q
//! within each pool, and reallocation of the leftover budget over the global
//! remainder in descending similarity.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use crate::assign::CandidatePools;
use crate::error::{Error, Result};
use crate::manifest::{SelectionEntry, Stage};
use crate::textio::write_kv;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub entries: Vec<SelectionEntry>,
    /// Entries per cluster; empty for strategies that do not cluster.
    pub per_cluster_counts: Vec<usize>,
    /// Entries taken from the global remainder after the quota phase.
    pub reallocated_count: usize,
    pub strategy: String,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn stats(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("strategy".to_string(), self.strategy.clone()),
            ("entries".to_string(), self.entries.len().to_string()),
            ("reallocated".to_string(), self.reallocated_count.to_string()),
            ("clusters".to_string(), self.per_cluster_counts.len().to_string()),
        ];
        kv.extend(
            self.per_cluster_counts
                .iter()
                .enumerate()
                .map(|(k, c)| (format!("cluster.{k}"), c.to_string())),
        );
        kv
    }
}

pub fn write_stats(result: &SelectionResult, path: &Path) -> Result<()> {
    write_kv(path, &result.stats())
}

/// Head of one pool's unselected suffix, ordered so the max-heap pops the
/// highest similarity first and the smallest id among equals.
struct Head<'a> {
    sim: f64,
    id: &'a str,
    cluster: usize,
}

impl PartialEq for Head<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Head<'_> {}

impl PartialOrd for Head<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Head<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.id.cmp(self.id))
    }
}

/// Selects `min(budget, total candidates)` samples.
///
/// With `q = ⌊budget / K⌋`, each pool first contributes its top-`q` (or all of
/// it when smaller). The rest of the budget is filled from the union of the
/// unselected candidates in descending similarity, ties by ascending id. When
/// `budget < K` the quota is zero and selection is purely global.
///
/// Pools are sorted by the same key as the remainder, so every pool's selected
/// set is a prefix of the pool.
pub fn stratified_select(pools: &CandidatePools, budget: usize) -> Result<SelectionResult> {
    if budget == 0 {
        return Err(Error::Config("sampling budget must be >= 1".into()));
    }
    let k = pools.k();
    let target = budget.min(pools.total());
    let q = if k == 0 { 0 } else { budget / k };
    let mut taken: Vec<usize> = pools.pools.iter().map(|p| p.len().min(q)).collect();
    let quota_total: usize = taken.iter().sum();

    let mut heap: BinaryHeap<Head<'_>> = pools
        .pools
        .iter()
        .enumerate()
        .filter_map(|(c, p)| {
            p.get(taken[c]).map(|e| Head {
                sim: e.sim,
                id: &e.id,
                cluster: c,
            })
        })
        .collect();
    for _ in quota_total..target {
        let head = heap.pop().expect("remainder holds the missing candidates");
        let c = head.cluster;
        taken[c] += 1;
        if let Some(e) = pools.pools[c].get(taken[c]) {
            heap.push(Head {
                sim: e.sim,
                id: &e.id,
                cluster: c,
            });
        }
    }

    let entries = pools
        .pools
        .iter()
        .enumerate()
        .flat_map(|(c, p)| {
            p[..taken[c]]
                .iter()
                .enumerate()
                .map(move |(rank, e)| SelectionEntry {
                    id: e.id.clone(),
                    stage: Stage::ClusterSample,
                    cluster: Some(c as u32),
                    rank_in_cluster: Some(rank as u64),
                    similarity: Some(e.sim),
                    entropy_bits: None,
                })
        })
        .collect();
    Ok(SelectionResult {
        entries,
        per_cluster_counts: taken,
        reallocated_count: target - quota_total,
        strategy: "primary".into(),
    })
}

/// Target subset size for an overall pruning ratio:
/// `round((1 - ratio) · n_original)`. Fails when stage I left fewer samples
/// than that.
pub fn compute_budget(n_after_stage1: usize, overall_pruning_ratio: f64, n_original: usize) -> Result<usize> {
    if !(overall_pruning_ratio > 0.0 && overall_pruning_ratio < 1.0) {
        return Err(Error::Config(format!(
            "overall pruning ratio must be in (0, 1), got {overall_pruning_ratio}"
        )));
    }
    if n_after_stage1 > n_original {
        return Err(Error::Config(format!(
            "stage-I output ({n_after_stage1}) is larger than the original corpus ({n_original})"
        )));
    }
    let budget = ((1.0 - overall_pruning_ratio) * n_original as f64).round() as usize;
    if budget == 0 {
        return Err(Error::Config(format!(
            "pruning {overall_pruning_ratio} of {n_original} samples leaves an empty budget"
        )));
    }
    if budget > n_after_stage1 {
        return Err(Error::Infeasible {
            budget,
            available: n_after_stage1,
        });
    }
    Ok(budget)
}
