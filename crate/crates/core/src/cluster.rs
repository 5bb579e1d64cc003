//! Prior-centroid construction: spherical k-means over reference embeddings.
//!
//! Rows and centroids live on the unit sphere. The assignment step picks the
//! centroid with the largest cosine similarity, the update step takes the
//! normalized mean of each cluster, and the monitored objective is
//! `Σ_x max_k ⟨z_x, μ_k⟩`, which never decreases from one iteration to the next.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assign::nearest_rows;
use crate::embedding::{read_embeddings, write_embeddings, EmbeddingMatrix, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::textio::{read_kv, write_kv};

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMethod {
    #[default]
    KMeansPlusPlus,
    RandomRows,
}

impl InitMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMethod::KMeansPlusPlus => "kmeans_pp",
            InitMethod::RandomRows => "random_rows",
        }
    }
}

impl std::str::FromStr for InitMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kmeans_pp" => Ok(Self::KMeansPlusPlus),
            "random_rows" => Ok(Self::RandomRows),
            other => Err(format!("unknown init method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative objective improvement drops below this.
    pub tol: f64,
    pub init: InitMethod,
}

impl ClusterConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            init: InitMethod::default(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("cluster k must be >= 1".into()));
        }
        if self.k > n {
            return Err(Error::Config(format!(
                "cluster k = {} exceeds the {n} input rows",
                self.k
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("cluster max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("cluster tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMeta {
    pub seed: u64,
    pub iterations: usize,
    pub objective: f64,
    pub init: InitMethod,
}

/// K unit-norm centroids, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    dim: usize,
    centroids: Vec<f32>,
    pub meta: ClusterMeta,
}

impl CentroidSet {
    pub fn new(dim: usize, centroids: Vec<f32>, meta: ClusterMeta) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::Validation(format!(
                "{} centroid values do not form rows of dim {dim}",
                centroids.len()
            )));
        }
        Ok(Self {
            dim,
            centroids,
            meta,
        })
    }

    /// Normalizes arbitrary rows into a centroid set.
    pub fn from_rows(dim: usize, mut rows: Vec<f32>) -> Result<Self> {
        for r in rows.chunks_exact_mut(dim.max(1)) {
            let n = norm(r);
            if n < 1e-12 || !n.is_finite() {
                return Err(Error::Degenerate("zero-norm centroid".into()));
            }
            r.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
        Self::new(
            dim,
            rows,
            ClusterMeta {
                seed: 0,
                iterations: 0,
                objective: 0.0,
                init: InitMethod::default(),
            },
        )
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn check_unit_norm(&self, tol: f64) -> Result<()> {
        for (k, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let n = norm(c);
            if !((n - 1.0).abs() <= tol) {
                return Err(Error::Precondition(format!(
                    "centroid {k} has norm {n} (expected 1 ± {tol})"
                )));
            }
        }
        Ok(())
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes centroids in the embedding format plus a `<path>.meta` sidecar.
pub fn write_centroids(c: &CentroidSet, path: &Path) -> Result<()> {
    let ids = (0..c.k()).map(|k| format!("centroid_{k}")).collect();
    let m = EmbeddingMatrix::new(ids, c.dim, c.centroids.clone())?;
    write_embeddings(&m, path, true)?;
    write_kv(
        &meta_path(path),
        &[
            ("k".into(), c.k().to_string()),
            ("dim".into(), c.dim.to_string()),
            ("seed".into(), c.meta.seed.to_string()),
            ("iterations".into(), c.meta.iterations.to_string()),
            ("objective".into(), format!("{:?}", c.meta.objective)),
            ("init".into(), c.meta.init.as_str().into()),
        ],
    )
}

pub fn read_centroids(path: &Path) -> Result<CentroidSet> {
    let m = read_embeddings(path)?;
    let mp = meta_path(path);
    let mut meta = ClusterMeta {
        seed: 0,
        iterations: 0,
        objective: 0.0,
        init: InitMethod::default(),
    };
    if mp.exists() {
        let bad = |k: &str| Error::Format(format!("{}: bad value for {k}", mp.display()));
        for (k, v) in read_kv(&mp)? {
            match k.as_str() {
                "seed" => meta.seed = v.parse().map_err(|_| bad(&k))?,
                "iterations" => meta.iterations = v.parse().map_err(|_| bad(&k))?,
                "objective" => meta.objective = v.parse().map_err(|_| bad(&k))?,
                "init" => meta.init = v.parse().map_err(|_| bad(&k))?,
                _ => {}
            }
        }
    }
    if m.is_empty() {
        return Err(Error::Format(format!("{}: no centroids", path.display())));
    }
    let (_, dim, data) = m.into_parts();
    CentroidSet::new(dim, data, meta)
}

fn rows_equal(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Marks rows that are bit-identical to `c` and lowers each row's cosine
/// distance to the nearest chosen centroid.
fn absorb_centroid(m: &EmbeddingMatrix, c: &[f32], min_d: &mut [f64], dup: &mut [bool]) {
    m.data()
        .par_chunks_exact(m.dim())
        .zip(min_d.par_iter_mut().zip(dup.par_iter_mut()))
        .for_each(|(row, (d, is_dup))| {
            let s = dot(row, c);
            if s > 1.0 - 1e-6 && rows_equal(row, c) {
                *is_dup = true;
            }
            let dist = (1.0 - s).max(0.0);
            if dist < *d {
                *d = dist;
            }
        });
}

/// k-means++ seeding under cosine distance `d = 1 − ⟨x, c⟩`: each further
/// centroid is drawn with probability proportional to `d²` to the nearest
/// centroid chosen so far. Chosen rows are pairwise distinct.
pub fn kmeanspp_init(m: &EmbeddingMatrix, k: usize, seed: u64) -> Result<CentroidSet> {
    let n = m.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot seed {k} centroids from {n} rows")));
    }
    m.check_unit_norm(UNIT_NORM_TOL)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut dup = vec![false; n];

    let first = rng.random_range(0..n);
    chosen.push(first);
    absorb_centroid(m, m.row(first), &mut min_d, &mut dup);

    while chosen.len() < k {
        let weight = |i: usize| if dup[i] { 0.0 } else { min_d[i] * min_d[i] };
        let total: f64 = (0..n).map(weight).sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in 0..n {
                let w = weight(i);
                if w > 0.0 {
                    acc += w;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // every remaining row is numerically on top of a centroid
            let fresh: Vec<usize> = (0..n).filter(|&i| !dup[i]).collect();
            if fresh.is_empty() {
                return Err(Error::Degenerate(format!(
                    "only {} distinct rows available for k = {k}",
                    chosen.len()
                )));
            }
            fresh[rng.random_range(0..fresh.len())]
        };
        chosen.push(pick);
        absorb_centroid(m, m.row(pick), &mut min_d, &mut dup);
    }
    Ok(from_row_indices(m, &chosen, seed, InitMethod::KMeansPlusPlus))
}

/// K distinct rows drawn uniformly without replacement.
pub fn random_rows_init(m: &EmbeddingMatrix, k: usize, seed: u64) -> Result<CentroidSet> {
    let n = m.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot seed {k} centroids from {n} rows")));
    }
    m.check_unit_norm(UNIT_NORM_TOL)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut chosen = Vec::with_capacity(k);
    for i in order {
        let key: Vec<u32> = m.row(i).iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            chosen.push(i);
            if chosen.len() == k {
                break;
            }
        }
    }
    if chosen.len() < k {
        return Err(Error::Degenerate(format!(
            "only {} distinct rows available for k = {k}",
            chosen.len()
        )));
    }
    Ok(from_row_indices(m, &chosen, seed, InitMethod::RandomRows))
}

fn from_row_indices(m: &EmbeddingMatrix, rows: &[usize], seed: u64, init: InitMethod) -> CentroidSet {
    let mut data = Vec::with_capacity(rows.len() * m.dim());
    for &i in rows {
        data.extend_from_slice(m.row(i));
    }
    CentroidSet {
        dim: m.dim(),
        centroids: data,
        meta: ClusterMeta {
            seed,
            iterations: 0,
            objective: 0.0,
            init,
        },
    }
}

/// `Σ_x max_k ⟨z_x, μ_k⟩`.
pub fn cluster_objective(m: &EmbeddingMatrix, c: &CentroidSet) -> Result<f64> {
    if m.dim() != c.dim {
        return Err(Error::DimMismatch {
            expected: c.dim,
            actual: m.dim(),
        });
    }
    let (_, sims) = nearest_rows(m.data(), m.dim(), &c.centroids);
    Ok(sims.iter().sum())
}

/// New centroids from the current assignment. Clusters that end up empty (or
/// whose members cancel out) are reseeded to the worst-fit rows.
fn update_centroids(
    m: &EmbeddingMatrix,
    labels: &[u32],
    sims: &[f64],
    prev: &[f32],
    k: usize,
) -> Vec<f32> {
    let dim = m.dim();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l as usize].push(i as u32);
    }
    let updated: Vec<Option<Vec<f32>>> = members
        .par_iter()
        .map(|rows| {
            if rows.is_empty() {
                return None;
            }
            let mut sum = vec![0.0f64; dim];
            for &i in rows {
                for (s, v) in sum.iter_mut().zip(m.row(i as usize)) {
                    *s += *v as f64;
                }
            }
            let n = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return None;
            }
            Some(sum.iter().map(|v| (v / n) as f32).collect())
        })
        .collect();

    let mut out = prev.to_vec();
    let mut empties = Vec::new();
    for (j, u) in updated.into_iter().enumerate() {
        match u {
            Some(c) => out[j * dim..(j + 1) * dim].copy_from_slice(&c),
            None => empties.push(j),
        }
    }
    if !empties.is_empty() {
        let mut worst: Vec<usize> = (0..m.len()).collect();
        worst.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
        let mut candidates = worst.into_iter();
        for j in empties {
            for i in candidates.by_ref() {
                let row = m.row(i);
                let taken = out.chunks_exact(dim).any(|c| rows_equal(c, row));
                if !taken {
                    out[j * dim..(j + 1) * dim].copy_from_slice(row);
                    break;
                }
            }
        }
    }
    out
}

/// Result of a k-means run including the per-iteration objective trace.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub centroids: CentroidSet,
    /// Objective after initialization, then after every accepted iteration.
    pub history: Vec<f64>,
    pub labels: Vec<u32>,
}

pub fn spherical_kmeans(m: &EmbeddingMatrix, cfg: &ClusterConfig) -> Result<CentroidSet> {
    spherical_kmeans_run(m, cfg).map(|r| r.centroids)
}

pub fn spherical_kmeans_run(m: &EmbeddingMatrix, cfg: &ClusterConfig) -> Result<KMeansRun> {
    cfg.validate(m.len())?;
    m.check_unit_norm(UNIT_NORM_TOL)?;
    let init = match cfg.init {
        InitMethod::KMeansPlusPlus => kmeanspp_init(m, cfg.k, cfg.seed)?,
        InitMethod::RandomRows => random_rows_init(m, cfg.k, cfg.seed)?,
    };
    let dim = m.dim();
    let mut centroids = init.centroids;
    let (mut labels, mut sims) = nearest_rows(m.data(), dim, &centroids);
    let mut objective: f64 = sims.iter().sum();
    let mut history = vec![objective];
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let next = update_centroids(m, &labels, &sims, &centroids, cfg.k);
        let (next_labels, next_sims) = nearest_rows(m.data(), dim, &next);
        let next_objective: f64 = next_sims.iter().sum();
        // rounding can only cost the last few ulps here; treat it as converged
        if next_objective < objective {
            break;
        }
        let gain = (next_objective - objective) / objective.abs().max(f64::MIN_POSITIVE);
        let stable = next_labels == labels;
        centroids = next;
        labels = next_labels;
        sims = next_sims;
        objective = next_objective;
        history.push(objective);
        if stable || gain < cfg.tol {
            break;
        }
    }

    Ok(KMeansRun {
        centroids: CentroidSet {
            dim,
            centroids,
            meta: ClusterMeta {
                seed: cfg.seed,
                iterations,
                objective,
                init: cfg.init,
            },
        },
        history,
        labels,
    })
}
