//! End-to-end run: entropy filter → reference centroids → assignment →
//! quota-balanced selection, with per-stage outputs in one directory.
//!
//! Each completed stage leaves a `.done.<stage>` marker holding a fingerprint
//! chained from the previous stage, its settings and its inputs. A rerun with
//! the same fingerprint reloads that stage's outputs instead of recomputing.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::assign::{
    assign_file, pool_by_cluster, read_assignments, write_assignments, write_assignments_exact, AssignmentTable,
};
use crate::baselines::{moderate_ds_select, nearest_by_cluster, random_select, BaselineStrategy};
use crate::cluster::{read_centroids, spherical_kmeans, write_centroids, CentroidSet};
use crate::config::{BudgetSpec, PipelineConfig, Strategy};
use crate::embedding::{ids_path, l2_normalize_in_place, read_embeddings, EmbeddingMatrix};
use crate::entropy::{apply_scores, entropy_filter, read_scores, write_rejects, write_scores, EntropyConfig};
use crate::error::{Error, Result};
use crate::manifest::{load_manifest, write_manifest, write_selection, DatasetManifest};
use crate::raster::RasterSource;
use crate::sample::{compute_budget, stratified_select, write_stats, SelectionResult};
use crate::seed::derive_seed;
use crate::textio::write_atomic;

pub const KEPT_MANIFEST: &str = "kept_manifest.tsv";
pub const ENTROPY_SCORES: &str = "entropy_scores.tsv";
pub const ENTROPY_REJECTS: &str = "entropy_rejects.tsv";
pub const CENTROIDS: &str = "centroids.bin";
pub const ASSIGNMENTS: &str = "assignments.tsv";
pub const ASSIGNMENTS_EXACT: &str = ".assignments.exact.tsv";
pub const SELECTION: &str = "selection.tsv";
pub const SELECTION_STATS: &str = "selection_stats.tsv";
pub const RUN_METADATA: &str = "run_metadata.cfg";

/// At most this many missing ids are named in the error.
const MISSING_SHOWN: usize = 100;

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub n_original: usize,
    pub n_after_entropy: usize,
    pub n_rejected: usize,
    pub budget: usize,
    pub selection: SelectionResult,
    /// Stages reloaded from a previous run.
    pub resumed: Vec<String>,
    pub output_dir: PathBuf,
}

/// Runs the configured strategy inside a thread pool of `cfg.workers`
/// threads. The worker count never changes the output.
pub fn run_pipeline<S: RasterSource + ?Sized>(cfg: &PipelineConfig, source: &S) -> Result<PipelineReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    pool.install(|| Runner::new(cfg)?.run(source))
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    resumed: Vec<String>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig) -> Result<Self> {
        let out = cfg.paths.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            cfg,
            out,
            resumed: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn run<S: RasterSource + ?Sized>(mut self, source: &S) -> Result<PipelineReport> {
        let manifest = load_manifest(&self.cfg.paths.unlabeled_manifest)?;
        let n_original = manifest.len();
        let base_fp = {
            let mut h = Sha256::new();
            h.update(b"manifest");
            hash_file_into(&mut h, &self.cfg.paths.unlabeled_manifest)?;
            hex(&h.finalize())
        };

        let (report_n_after, n_rejected, budget, selection) = match self.cfg.strategy {
            Strategy::Primary => {
                let ecfg = self.cfg.entropy.clone().ok_or_else(|| {
                    Error::Config("the primary strategy needs an entropy rule".into())
                })?;
                let (kept, scores, n_rejected, fp) = self.entropy_stage(&manifest, &ecfg, source, &base_fp)?;
                let budget = self.budget(kept.len(), n_original)?;
                let (centroids, fp) = self.centroid_stage(&fp)?;
                let kept_ids: HashSet<&str> = kept.ids().collect();
                let (table, _) = self.assign_stage(&centroids, &kept_ids, &fp)?;
                let pools = pool_by_cluster(&table)?;
                let mut sel = stratified_select(&pools, budget)?;
                let bits: HashMap<&str, f64> = scores.iter().map(|(id, h)| (id.as_str(), *h)).collect();
                for e in &mut sel.entries {
                    e.entropy_bits = bits.get(e.id.as_str()).copied();
                }
                sel.strategy = Strategy::Primary.as_str().into();
                (kept.len(), n_rejected, budget, sel)
            }
            Strategy::Baseline(b) => {
                let budget = self.budget(n_original, n_original)?;
                let sel = self.baseline(b, &manifest, budget, &base_fp)?;
                (n_original, 0, budget, sel)
            }
        };

        write_selection(&selection.entries, &self.path(SELECTION))?;
        write_stats(&selection, &self.path(SELECTION_STATS))?;
        let meta = format!(
            "# n_original = {n_original}\n# n_after_entropy = {report_n_after}\n# budget = {budget}\n{}",
            self.cfg.to_config_text()
        );
        write_atomic(&self.path(RUN_METADATA), |w| io::Write::write_all(w, meta.as_bytes()))?;
        Ok(PipelineReport {
            n_original,
            n_after_entropy: report_n_after,
            n_rejected,
            budget,
            selection,
            resumed: self.resumed,
            output_dir: self.out,
        })
    }

    fn budget(&self, available: usize, n_original: usize) -> Result<usize> {
        match self.cfg.budget {
            BudgetSpec::PruningRatio(r) => compute_budget(available, r, n_original),
            BudgetSpec::Explicit(b) if b > available => Err(Error::Infeasible { budget: b, available }),
            BudgetSpec::Explicit(b) => Ok(b),
        }
    }

    /// Returns true when `stage` already completed with fingerprint `fp`.
    fn is_done(&self, stage: &str, fp: &str, outputs: &[&str]) -> bool {
        let marker = self.path(&format!(".done.{stage}"));
        let done = fs::read_to_string(marker).is_ok_and(|s| s.trim() == fp)
            && outputs.iter().all(|o| self.path(o).exists());
        done
    }

    fn mark_done(&mut self, stage: &str, fp: &str) -> Result<()> {
        let marker = self.path(&format!(".done.{stage}"));
        write_atomic(&marker, |w| io::Write::write_all(w, format!("{fp}\n").as_bytes()))
    }

    fn entropy_stage<S: RasterSource + ?Sized>(
        &mut self,
        manifest: &DatasetManifest,
        ecfg: &EntropyConfig,
        source: &S,
        prev: &str,
    ) -> Result<(DatasetManifest, Vec<(String, f64)>, usize, String)> {
        let fp = {
            let mut h = Sha256::new();
            h.update(prev.as_bytes());
            h.update(format!("entropy|{:?}|{}|{}", ecfg.rule, ecfg.levels, ecfg.grayscale.as_str()).as_bytes());
            if let Some(p) = &self.cfg.paths.entropy_scores {
                hash_file_into(&mut h, p)?;
            }
            hex(&h.finalize())
        };
        let outputs = [KEPT_MANIFEST, ENTROPY_SCORES, ENTROPY_REJECTS];
        if self.is_done("entropy", &fp, &outputs) {
            let kept = load_manifest(&self.path(KEPT_MANIFEST))?;
            let scores = read_scores(&self.path(ENTROPY_SCORES))?;
            let rejected = manifest.len() - scores.len();
            self.resumed.push("entropy".into());
            return Ok((kept, scores, rejected, fp));
        }

        let (kept, scores, rejects) = match &self.cfg.paths.entropy_scores {
            Some(p) => {
                let given: HashMap<String, f64> = read_scores(p)?.into_iter().collect();
                let mut scores = Vec::new();
                let mut rejects = Vec::new();
                let flat: Vec<Option<f64>> = manifest
                    .records
                    .iter()
                    .map(|r| match given.get(&r.id) {
                        Some(&h) => {
                            scores.push((r.id.clone(), h));
                            Some(h)
                        }
                        None => {
                            rejects.push((r.id.clone(), "no precomputed entropy score".to_string()));
                            None
                        }
                    })
                    .collect();
                (apply_scores(manifest, &flat, ecfg.rule), scores, rejects)
            }
            None => {
                let o = entropy_filter(manifest, ecfg, source)?;
                (o.kept, o.scores, o.rejects)
            }
        };
        write_manifest(&kept, &self.path(KEPT_MANIFEST))?;
        write_scores(&scores, &self.path(ENTROPY_SCORES))?;
        write_rejects(&rejects, &self.path(ENTROPY_REJECTS))?;
        self.mark_done("entropy", &fp)?;
        Ok((kept, scores, rejects.len(), fp))
    }

    fn centroid_stage(&mut self, prev: &str) -> Result<(CentroidSet, String)> {
        let ccfg = self.cfg.cluster_config("cluster");
        let fp = {
            let mut h = Sha256::new();
            h.update(prev.as_bytes());
            h.update(
                format!(
                    "centroids|{}|{}|{}|{:?}|{}",
                    ccfg.k,
                    ccfg.seed,
                    ccfg.max_iters,
                    ccfg.tol,
                    ccfg.init.as_str()
                )
                .as_bytes(),
            );
            for r in &self.cfg.paths.reference_embeddings {
                hash_file_into(&mut h, r)?;
                hash_file_into(&mut h, &ids_path(r))?;
            }
            hex(&h.finalize())
        };
        if self.is_done("centroids", &fp, &[CENTROIDS]) {
            self.resumed.push("centroids".into());
            return Ok((read_centroids(&self.path(CENTROIDS))?, fp));
        }
        let reference = load_reference(&self.cfg.paths.reference_embeddings)?;
        let centroids = spherical_kmeans(&reference, &ccfg)?;
        write_centroids(&centroids, &self.path(CENTROIDS))?;
        self.mark_done("centroids", &fp)?;
        Ok((centroids, fp))
    }

    /// Assigns every id in `keep` from the unlabeled embedding file.
    fn assign_stage(
        &mut self,
        centroids: &CentroidSet,
        keep: &HashSet<&str>,
        prev: &str,
    ) -> Result<(AssignmentTable, String)> {
        let emb = &self.cfg.paths.unlabeled_embeddings;
        let fp = {
            let mut h = Sha256::new();
            h.update(prev.as_bytes());
            h.update(b"assign");
            // Ids plus byte length stand in for the (possibly huge) matrix.
            hash_file_into(&mut h, &ids_path(emb))?;
            let len = fs::metadata(emb).map_err(|e| Error::io(emb, e))?.len();
            h.update(len.to_le_bytes());
            let mut ids: Vec<&&str> = keep.iter().collect();
            ids.sort();
            for id in ids {
                h.update(id.as_bytes());
                h.update(b"\n");
            }
            hex(&h.finalize())
        };
        if self.is_done("assign", &fp, &[ASSIGNMENTS, ASSIGNMENTS_EXACT]) {
            self.resumed.push("assign".into());
            let t = read_assignments(&self.path(ASSIGNMENTS_EXACT), Some(centroids.k()))?;
            return Ok((t, fp));
        }
        let table = assign_file(emb, centroids, self.cfg.chunk_rows, true, |id| keep.contains(id))?;
        check_coverage(keep, &table)?;
        write_assignments(&table, &self.path(ASSIGNMENTS))?;
        write_assignments_exact(&table, &self.path(ASSIGNMENTS_EXACT))?;
        self.mark_done("assign", &fp)?;
        Ok((table, fp))
    }

    fn baseline(
        &mut self,
        b: BaselineStrategy,
        manifest: &DatasetManifest,
        budget: usize,
        base_fp: &str,
    ) -> Result<SelectionResult> {
        match b {
            BaselineStrategy::Random => {
                let ids: Vec<String> = manifest.ids().map(str::to_string).collect();
                random_select(&ids, budget, derive_seed(self.cfg.seed, "baseline.random"))
            }
            BaselineStrategy::ModerateDs => {
                let (centroids, fp) = self.centroid_stage(base_fp)?;
                let keep: HashSet<&str> = manifest.ids().collect();
                let (table, _) = self.assign_stage(&centroids, &keep, &fp)?;
                moderate_ds_select(&table, budget)
            }
            BaselineStrategy::ClusterNearest => {
                let keep: HashSet<&str> = manifest.ids().collect();
                let m = read_embeddings(&self.cfg.paths.unlabeled_embeddings)?;
                let wanted: Vec<usize> = (0..m.len()).filter(|&i| keep.contains(m.ids()[i].as_str())).collect();
                let mut m = m.select_rows(&wanted);
                l2_normalize_in_place(&mut m)?;
                let table = AssignmentTable {
                    ids: m.ids().to_vec(),
                    labels: Vec::new(),
                    sims: Vec::new(),
                    k: 0,
                };
                check_coverage(&keep, &table)?;
                let ccfg = self.cfg.cluster_config("baseline.cluster_nearest");
                let centroids = spherical_kmeans(&m, &ccfg)?;
                nearest_by_cluster(&crate::assign::assign_nearest(&m, &centroids)?, budget)
            }
        }
    }
}

/// Concatenates and L2-normalizes the reference embedding files.
pub fn load_reference(paths: &[PathBuf]) -> Result<EmbeddingMatrix> {
    if paths.is_empty() {
        return Err(Error::Config("no reference embeddings given".into()));
    }
    let parts = paths.iter().map(|p| read_embeddings(p)).collect::<Result<Vec<_>>>()?;
    let mut m = EmbeddingMatrix::concat(parts)?;
    l2_normalize_in_place(&mut m)?;
    Ok(m)
}

fn check_coverage(keep: &HashSet<&str>, table: &AssignmentTable) -> Result<()> {
    if table.ids.len() == keep.len() {
        return Ok(());
    }
    let present: HashSet<&str> = table.ids.iter().map(String::as_str).collect();
    let mut missing: Vec<&str> = keep.iter().copied().filter(|id| !present.contains(id)).collect();
    missing.sort_unstable();
    Err(Error::MissingEmbeddings {
        total: missing.len(),
        shown: missing.iter().take(MISSING_SHOWN).map(|s| s.to_string()).collect(),
    })
}

fn hash_file_into(h: &mut Sha256, path: &Path) -> Result<()> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    io::copy(&mut f, h).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
