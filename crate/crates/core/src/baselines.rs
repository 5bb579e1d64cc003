//! Comparison strategies: uniform random, Moderate-DS (nearest to the
//! per-cluster median similarity) and cluster-nearest (cluster the target data
//! itself, keep the most central samples).
//!
//! Both cluster-based baselines split the budget across clusters in proportion
//! to cluster size with largest-remainder rounding rather than equal quotas.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::{assign_nearest, pool_by_cluster, AssignmentTable};
use crate::cluster::{spherical_kmeans, ClusterConfig};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::manifest::{SelectionEntry, Stage};
use crate::sample::SelectionResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineStrategy {
    Random,
    ModerateDs,
    ClusterNearest,
}

impl BaselineStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineStrategy::Random => "random",
            BaselineStrategy::ModerateDs => "moderate_ds",
            BaselineStrategy::ClusterNearest => "cluster_nearest",
        }
    }
}

impl std::str::FromStr for BaselineStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "moderate_ds" => Ok(Self::ModerateDs),
            "cluster_nearest" => Ok(Self::ClusterNearest),
            other => Err(format!("unknown baseline strategy {other:?}")),
        }
    }
}

fn check_budget(budget: usize) -> Result<()> {
    if budget == 0 {
        return Err(Error::Config("baseline budget must be >= 1".into()));
    }
    Ok(())
}

/// Splits `min(budget, Σ sizes)` across groups proportionally to size.
/// Leftover units go to the largest fractional remainders, ties to the
/// smaller index. No group receives more than its size.
pub fn proportional_allocation(sizes: &[usize], budget: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let total = budget.min(n);
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let (n128, t128) = (n as u128, total as u128);
    let mut alloc: Vec<usize> = sizes
        .iter()
        .map(|&s| (t128 * s as u128 / n128) as usize)
        .collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = t128 * sizes[a] as u128 % n128;
        let rb = t128 * sizes[b] as u128 % n128;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &g in order.iter().take(total - assigned) {
        alloc[g] += 1;
    }
    alloc
}

fn baseline_entry(id: &str) -> SelectionEntry {
    SelectionEntry {
        id: id.to_string(),
        stage: Stage::Baseline,
        cluster: None,
        rank_in_cluster: None,
        similarity: None,
        entropy_bits: None,
    }
}

/// Uniform sample without replacement of `min(budget, N)` ids, emitted in
/// input order.
pub fn random_select(ids: &[String], budget: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(budget)?;
    let n = ids.len();
    let amount = budget.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, amount).into_vec();
    picked.sort_unstable();
    Ok(SelectionResult {
        entries: picked.into_iter().map(|i| baseline_entry(&ids[i])).collect(),
        per_cluster_counts: Vec::new(),
        reallocated_count: 0,
        strategy: BaselineStrategy::Random.as_str().into(),
    })
}

/// Median of a non-empty slice sorted ascending.
fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per cluster, ranks members by `|sim − median(sim)|` ascending (ties by id)
/// and keeps a proportional share of the closest ones.
pub fn moderate_ds_select(assignments: &AssignmentTable, budget: usize) -> Result<SelectionResult> {
    check_budget(budget)?;
    assignments.validate()?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); assignments.k];
    for (i, &l) in assignments.labels.iter().enumerate() {
        groups[l as usize].push(i);
    }
    let ranked: Vec<Vec<(usize, f64)>> = groups
        .iter()
        .map(|members| {
            if members.is_empty() {
                return Vec::new();
            }
            let mut sims: Vec<f64> = members.iter().map(|&i| assignments.sims[i]).collect();
            sims.sort_by(f64::total_cmp);
            let med = median_sorted(&sims);
            let mut r: Vec<(usize, f64)> = members
                .iter()
                .map(|&i| (i, (assignments.sims[i] - med).abs()))
                .collect();
            r.sort_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then_with(|| assignments.ids[a.0].cmp(&assignments.ids[b.0]))
            });
            r
        })
        .collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let alloc = proportional_allocation(&sizes, budget);
    let mut entries = Vec::new();
    for (c, (r, &take)) in ranked.iter().zip(&alloc).enumerate() {
        for (rank, &(i, _)) in r[..take].iter().enumerate() {
            entries.push(SelectionEntry {
                cluster: Some(c as u32),
                rank_in_cluster: Some(rank as u64),
                similarity: Some(assignments.sims[i]),
                ..baseline_entry(&assignments.ids[i])
            });
        }
    }
    Ok(SelectionResult {
        entries,
        per_cluster_counts: alloc,
        reallocated_count: 0,
        strategy: BaselineStrategy::ModerateDs.as_str().into(),
    })
}

/// Nearest-to-centroid selection with proportional budgets over an existing
/// assignment of the target data.
pub fn nearest_by_cluster(assignments: &AssignmentTable, budget: usize) -> Result<SelectionResult> {
    check_budget(budget)?;
    let pools = pool_by_cluster(assignments)?;
    let alloc = proportional_allocation(&pools.sizes(), budget);
    let mut entries = Vec::new();
    for (c, (pool, &take)) in pools.pools.iter().zip(&alloc).enumerate() {
        for (rank, e) in pool[..take].iter().enumerate() {
            entries.push(SelectionEntry {
                cluster: Some(c as u32),
                rank_in_cluster: Some(rank as u64),
                similarity: Some(e.sim),
                ..baseline_entry(&e.id)
            });
        }
    }
    Ok(SelectionResult {
        entries,
        per_cluster_counts: alloc,
        reallocated_count: 0,
        strategy: BaselineStrategy::ClusterNearest.as_str().into(),
    })
}

/// Clusters `m` itself (no reference set), then keeps the samples nearest each
/// centroid.
pub fn cluster_nearest_select(m: &EmbeddingMatrix, k: usize, budget: usize, seed: u64) -> Result<SelectionResult> {
    cluster_nearest_select_with(m, &ClusterConfig::new(k, seed), budget)
}

pub fn cluster_nearest_select_with(
    m: &EmbeddingMatrix,
    cfg: &ClusterConfig,
    budget: usize,
) -> Result<SelectionResult> {
    check_budget(budget)?;
    let centroids = spherical_kmeans(m, cfg)?;
    nearest_by_cluster(&assign_nearest(m, &centroids)?, budget)
}

/// Sim-descending comparator on `(sim, id)` pairs, for callers that rank
/// ad hoc collections the same way the pools are ranked.
pub fn priority_cmp(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}
