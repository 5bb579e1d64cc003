//! Synthetic corpora, complexity measurements and strategy comparison.
//!
//! Corpora are mixtures of normalized Gaussian blobs around random unit means
//! with Zipf-distributed component sizes plus a fraction of uniformly random
//! directions. Coverage metrics are always computed from the generator's
//! labels, never from a method's own clusters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::assign::{assign_nearest, pool_by_cluster};
use crate::baselines::{cluster_nearest_select_with, moderate_ds_select, random_select};
use crate::cluster::{spherical_kmeans, CentroidSet, ClusterConfig};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::sample::{stratified_select, SelectionResult};
use crate::seed::derive_seed;
use crate::textio::{fmt6, write_atomic, write_kv};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub k_true: usize,
    /// Zipf exponent over component sizes; 0 gives equal sizes.
    pub imbalance: f64,
    /// Fraction of rows drawn as uniformly random directions.
    pub noise_fraction: f64,
    /// Per-coordinate standard deviation of the blob noise before normalizing.
    pub spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, dim: usize, k_true: usize, seed: u64) -> Self {
        Self {
            n,
            dim,
            k_true,
            imbalance: 0.0,
            noise_fraction: 0.0,
            spread: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 || self.k_true == 0 {
            return Err(Error::Config("synthetic n, dim and k_true must be positive".into()));
        }
        if self.k_true > self.n {
            return Err(Error::Config(format!(
                "k_true = {} exceeds n = {}",
                self.k_true, self.n
            )));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::Config("noise_fraction must be in [0, 1)".into()));
        }
        if !(self.imbalance >= 0.0) || !(self.spread >= 0.0) {
            return Err(Error::Config("imbalance and spread must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generated rows with their ground-truth component (`None` for noise rows).
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub matrix: EmbeddingMatrix,
    pub labels: Vec<Option<u32>>,
}

pub fn component_means(k_true: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic.means"));
    let mut out = Vec::with_capacity(k_true * dim);
    for _ in 0..k_true {
        out.extend(random_unit(&mut rng, dim));
    }
    out
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// Component sizes proportional to `1 / (j + 1)^imbalance`, largest-remainder
/// rounded to sum to `n`.
pub fn zipf_sizes(n: usize, k: usize, imbalance: f64) -> Vec<usize> {
    let w: Vec<f64> = (0..k).map(|j| ((j + 1) as f64).powf(-imbalance)).collect();
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let short = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().take(short) {
        sizes[j] += 1;
    }
    sizes
}

fn blob_row(rng: &mut ChaCha8Rng, mean: &[f32], spread: f64) -> Vec<f32> {
    let v: Vec<f64> = mean
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            m as f64 + spread * z
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-9 {
        return mean.to_vec();
    }
    v.iter().map(|x| (x / n) as f32).collect()
}

fn build(labels: Vec<Option<u32>>, means: &[f32], spec: &SyntheticSpec, stream: &str, prefix: &str) -> SyntheticCorpus {
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream));
    let mut data = Vec::with_capacity(labels.len() * dim);
    for l in &labels {
        match l {
            Some(j) => {
                let j = *j as usize;
                data.extend(blob_row(&mut rng, &means[j * dim..(j + 1) * dim], spec.spread));
            }
            None => data.extend(random_unit(&mut rng, dim)),
        }
    }
    let ids = (0..labels.len()).map(|i| format!("{prefix}{i:08}")).collect();
    SyntheticCorpus {
        matrix: EmbeddingMatrix::new(ids, dim, data).expect("generated ids are unique"),
        labels,
    }
}

/// Imbalanced unlabeled corpus. Row order is shuffled so ids carry no
/// component information.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let means = component_means(spec.k_true, spec.dim, spec.seed);
    let n_noise = (spec.noise_fraction * spec.n as f64).round() as usize;
    let sizes = zipf_sizes(spec.n - n_noise, spec.k_true, spec.imbalance);
    let mut labels: Vec<Option<u32>> = Vec::with_capacity(spec.n);
    for (j, &s) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat_n(Some(j as u32), s));
    }
    labels.extend(std::iter::repeat_n(None, n_noise));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synthetic.order"));
    labels.shuffle(&mut rng);
    Ok(build(labels, &means, spec, "synthetic.rows", "s"))
}

/// Balanced, noise-free reference set over the same components as
/// `generate_synthetic(spec)`, standing in for curated classification data.
pub fn generate_reference(spec: &SyntheticSpec, n_ref: usize) -> Result<SyntheticCorpus> {
    spec.validate()?;
    if n_ref < spec.k_true {
        return Err(Error::Config(format!(
            "reference size {n_ref} is smaller than k_true = {}",
            spec.k_true
        )));
    }
    let means = component_means(spec.k_true, spec.dim, spec.seed);
    let labels = zipf_sizes(n_ref, spec.k_true, 0.0)
        .iter()
        .enumerate()
        .flat_map(|(j, &s)| std::iter::repeat_n(Some(j as u32), s))
        .collect();
    Ok(build(labels, &means, spec, "synthetic.reference", "ref"))
}

/// Fraction of components present in the corpus that have at least one
/// selected row.
pub fn component_recall(selected: &[usize], labels: &[Option<u32>]) -> f64 {
    let k = labels.iter().flatten().map(|&l| l as usize + 1).max().unwrap_or(0);
    if k == 0 {
        return 0.0;
    }
    let mut present = vec![false; k];
    labels.iter().flatten().for_each(|&l| present[l as usize] = true);
    let mut hit = vec![false; k];
    for &i in selected {
        if let Some(l) = labels[i] {
            hit[l as usize] = true;
        }
    }
    let n_present = present.iter().filter(|&&p| p).count();
    hit.iter().filter(|&&h| h).count() as f64 / n_present as f64
}

/// Mean over selected rows of the highest similarity to another selected row.
pub fn redundancy(m: &EmbeddingMatrix, selected: &[usize]) -> f64 {
    if selected.len() < 2 {
        return 0.0;
    }
    let best: Vec<f64> = selected
        .par_iter()
        .map(|&i| {
            selected
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dot(m.row(i), m.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    best.iter().sum::<f64>() / best.len() as f64
}

fn selected_rows(m: &EmbeddingMatrix, r: &SelectionResult) -> Vec<usize> {
    let index: std::collections::HashMap<&str, usize> =
        m.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    r.ids().map(|id| index[id]).collect()
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn time_once<T>(f: impl FnOnce() -> Result<T>) -> Result<f64> {
    let t = Instant::now();
    std::hint::black_box(f()?);
    Ok(t.elapsed().as_secs_f64())
}

/// Least-squares fit of `y = a + b·x`; returns `(b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    pub sizes: Vec<usize>,
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub repeats: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub sizes: Vec<usize>,
    pub assign_secs: Vec<f64>,
    pub end_to_end_secs: Vec<f64>,
    /// log-log slope of assignment time against N, and its R².
    pub assign_slope: f64,
    pub assign_r2: f64,
    /// Assignment time with 2K centroids over time with K, at the middle size.
    pub k_doubling_ratio: f64,
    /// Largest end-to-end time ratio between consecutive sizes N and 2N.
    pub end_to_end_doubling_ratio: f64,
}

impl ScalingReport {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        for (i, n) in self.sizes.iter().enumerate() {
            kv.push((format!("assign_secs.{n}"), fmt6(self.assign_secs[i])));
            kv.push((format!("end_to_end_secs.{n}"), fmt6(self.end_to_end_secs[i])));
        }
        kv.push(("assign_loglog_slope".into(), fmt6(self.assign_slope)));
        kv.push(("assign_loglog_r2".into(), fmt6(self.assign_r2)));
        kv.push(("k_doubling_ratio".into(), fmt6(self.k_doubling_ratio)));
        kv.push(("end_to_end_doubling_ratio".into(), fmt6(self.end_to_end_doubling_ratio)));
        kv
    }
}

fn random_centroids(k: usize, dim: usize, seed: u64) -> Result<CentroidSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(k * dim);
    for _ in 0..k {
        rows.extend(random_unit(&mut rng, dim));
    }
    CentroidSet::from_rows(dim, rows)
}

/// Times assignment and assign→pool→select at each corpus size. Each timing
/// is the minimum over `repeats` rounds; rounds sweep every size in turn after
/// one untimed warm-up, so a transient slowdown cannot skew a single size.
pub fn run_scaling_study(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.sizes.len() < 3 || cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("scaling study needs at least 3 increasing sizes".into()));
    }
    in_pool(cfg.workers, || {
        let centroids = random_centroids(cfg.k, cfg.dim, derive_seed(cfg.seed, "bench.centroids"))?;
        let doubled = random_centroids(2 * cfg.k, cfg.dim, derive_seed(cfg.seed, "bench.centroids2"))?;
        let corpora = cfg
            .sizes
            .iter()
            .map(|&n| {
                let mut spec = SyntheticSpec::new(n, cfg.dim, 50.min(n), cfg.seed);
                spec.imbalance = 1.0;
                Ok(generate_synthetic(&spec)?.matrix)
            })
            .collect::<Result<Vec<_>>>()?;
        let mid = cfg.sizes.len() / 2;
        let e2e = |corpus: &EmbeddingMatrix| -> Result<SelectionResult> {
            let budget = (corpus.len() as f64 * 0.15).round().max(1.0) as usize;
            let t = assign_nearest(corpus, &centroids)?;
            stratified_select(&pool_by_cluster(&t)?, budget)
        };
        std::hint::black_box(e2e(&corpora[0])?);

        let mut assign_secs = vec![f64::INFINITY; corpora.len()];
        let mut e2e_secs = vec![f64::INFINITY; corpora.len()];
        let mut doubled_secs = f64::INFINITY;
        for _ in 0..cfg.repeats.max(1) {
            for (i, corpus) in corpora.iter().enumerate() {
                assign_secs[i] = assign_secs[i].min(time_once(|| assign_nearest(corpus, &centroids))?);
                e2e_secs[i] = e2e_secs[i].min(time_once(|| e2e(corpus))?);
                if i == mid {
                    doubled_secs = doubled_secs.min(time_once(|| assign_nearest(corpus, &doubled))?);
                }
            }
        }
        let k_ratio = doubled_secs / assign_secs[mid];
        let x: Vec<f64> = cfg.sizes.iter().map(|&n| (n as f64).ln()).collect();
        let y: Vec<f64> = assign_secs.iter().map(|t| t.ln()).collect();
        let (slope, r2) = linear_fit(&x, &y);
        let e2e_ratio = cfg
            .sizes
            .windows(2)
            .zip(e2e_secs.windows(2))
            .filter(|(n, _)| n[1] == 2 * n[0])
            .map(|(_, t)| t[1] / t[0])
            .fold(f64::NAN, f64::max);
        Ok(ScalingReport {
            sizes: cfg.sizes.clone(),
            assign_secs,
            end_to_end_secs: e2e_secs,
            assign_slope: slope,
            assign_r2: r2,
            k_doubling_ratio: k_ratio,
            end_to_end_doubling_ratio: e2e_ratio,
        })
    })?
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceVsFullReport {
    /// Cluster the reference set, then assign, pool and select the corpus.
    pub reference_guided_secs: f64,
    /// Cluster the whole corpus with the same K and iteration cap.
    pub full_corpus_secs: f64,
    pub full_corpus_iterations: usize,
    pub reference_iterations: usize,
}

impl ReferenceVsFullReport {
    pub fn ratio(&self) -> f64 {
        self.reference_guided_secs / self.full_corpus_secs
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("reference_guided_secs".into(), fmt6(self.reference_guided_secs)),
            ("full_corpus_secs".into(), fmt6(self.full_corpus_secs)),
            ("ratio".into(), fmt6(self.ratio())),
            ("reference_iterations".into(), self.reference_iterations.to_string()),
            ("full_corpus_iterations".into(), self.full_corpus_iterations.to_string()),
        ]
    }
}

pub fn run_reference_vs_full(
    corpus: &EmbeddingMatrix,
    reference: &EmbeddingMatrix,
    cluster: &ClusterConfig,
    budget: usize,
) -> Result<ReferenceVsFullReport> {
    let t = Instant::now();
    let prior = spherical_kmeans(reference, cluster)?;
    let table = assign_nearest(corpus, &prior)?;
    std::hint::black_box(stratified_select(&pool_by_cluster(&table)?, budget)?);
    let reference_guided_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let full = spherical_kmeans(corpus, cluster)?;
    let full_corpus_secs = t.elapsed().as_secs_f64();
    Ok(ReferenceVsFullReport {
        reference_guided_secs,
        full_corpus_secs,
        full_corpus_iterations: full.meta.iterations,
        reference_iterations: prior.meta.iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub corpus: SyntheticSpec,
    pub reference_size: usize,
    pub k: usize,
    pub pruning_ratio: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyScore {
    pub strategy: String,
    pub entries: usize,
    pub recall: f64,
    pub redundancy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub budget: usize,
    pub scores: Vec<StrategyScore>,
}

impl CompareReport {
    pub fn score(&self, strategy: &str) -> Option<&StrategyScore> {
        self.scores.iter().find(|s| s.strategy == strategy)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("budget".to_string(), self.budget.to_string())];
        for s in &self.scores {
            kv.push((format!("{}.entries", s.strategy), s.entries.to_string()));
            kv.push((format!("{}.recall", s.strategy), fmt6(s.recall)));
            kv.push((format!("{}.redundancy", s.strategy), fmt6(s.redundancy)));
        }
        kv
    }
}

/// Runs the reference-guided method and every baseline at the same budget on
/// one synthetic corpus.
pub fn compare_strategies(cfg: &CompareConfig) -> Result<CompareReport> {
    let corpus = generate_synthetic(&cfg.corpus)?;
    let reference = generate_reference(&cfg.corpus, cfg.reference_size)?;
    let n = corpus.matrix.len();
    let budget = (((1.0 - cfg.pruning_ratio) * n as f64).round() as usize).max(1);
    let seed = cfg.corpus.seed;
    let mut cluster = ClusterConfig::new(cfg.k, derive_seed(seed, "cluster"));
    cluster.max_iters = cfg.max_iters;

    let prior = spherical_kmeans(&reference.matrix, &cluster)?;
    let table = assign_nearest(&corpus.matrix, &prior)?;
    let mut results = vec![stratified_select(&pool_by_cluster(&table)?, budget)?];
    results.push(random_select(
        corpus.matrix.ids(),
        budget,
        derive_seed(seed, "baseline.random"),
    )?);
    results.push(moderate_ds_select(&table, budget)?);
    let mut own = cluster.clone();
    own.seed = derive_seed(seed, "baseline.cluster_nearest");
    own.k = own.k.min(n);
    results.push(cluster_nearest_select_with(&corpus.matrix, &own, budget)?);

    let scores = results
        .iter()
        .map(|r| {
            let rows = selected_rows(&corpus.matrix, r);
            StrategyScore {
                strategy: r.strategy.clone(),
                entries: r.len(),
                recall: component_recall(&rows, &corpus.labels),
                redundancy: redundancy(&corpus.matrix, &rows),
            }
        })
        .collect();
    Ok(CompareReport { budget, scores })
}

/// Writes a `key<TAB>value` report.
pub fn write_report(kv: &[(String, String)], path: &std::path::Path) -> Result<()> {
    write_kv(path, kv)
}

/// Writes per-trial comparison rows as CSV.
pub fn write_compare_csv(trials: &[(u64, CompareReport)], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    write_atomic(path, |w| {
        writeln!(w, "seed,strategy,budget,entries,recall,redundancy")?;
        for (seed, r) in trials {
            for s in &r.scores {
                writeln!(
                    w,
                    "{seed},{},{},{},{},{}",
                    s.strategy,
                    r.budget,
                    s.entries,
                    fmt6(s.recall),
                    fmt6(s.redundancy)
                )?;
            }
        }
        Ok(())
    })
}
