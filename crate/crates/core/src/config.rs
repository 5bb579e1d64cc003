//! Pipeline configuration: a flat `section.key = value` text file.
//!
//! ```text
//! # Best stage-I/stage-II setting at 85% pruning.
//! paths.unlabeled_manifest = corpus.tsv
//! paths.unlabeled_embeddings = corpus.bin
//! paths.reference_embeddings = ucm.bin, nwpu.bin
//! paths.output_dir = out
//! entropy.mode = top_fraction
//! entropy.keep_fraction = 0.30
//! sampling.overall_pruning_ratio = 0.85
//! cluster.k = 200
//! run.seed = 17
//! ```
//!
//! Relative paths resolve against the config file's directory. Unknown keys
//! are rejected. Every default that gets applied is listed in the validation
//! report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::assign::DEFAULT_CHUNK_ROWS;
use crate::baselines::BaselineStrategy;
use crate::cluster::{ClusterConfig, InitMethod, DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::entropy::{EntropyConfig, EntropyRule, GrayscalePolicy, DEFAULT_LEVELS};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Every key the config understands.
pub const KNOWN_KEYS: &[&str] = &[
    "paths.unlabeled_manifest",
    "paths.unlabeled_embeddings",
    "paths.reference_embeddings",
    "paths.entropy_scores",
    "paths.output_dir",
    "entropy.mode",
    "entropy.keep_fraction",
    "entropy.tau",
    "entropy.levels",
    "entropy.grayscale",
    "cluster.k",
    "cluster.max_iters",
    "cluster.tol",
    "cluster.init",
    "sampling.overall_pruning_ratio",
    "sampling.budget",
    "run.strategy",
    "run.seed",
    "run.workers",
    "run.chunk_rows",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Primary,
    Baseline(BaselineStrategy),
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Primary => "primary",
            Strategy::Baseline(b) => b.as_str(),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "primary" {
            Ok(Strategy::Primary)
        } else {
            s.parse()
                .map(Strategy::Baseline)
                .map_err(|_| format!("unknown strategy {s:?} (primary, random, moderate_ds, cluster_nearest)"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpec {
    PruningRatio(f64),
    Explicit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePaths {
    pub unlabeled_manifest: PathBuf,
    pub unlabeled_embeddings: PathBuf,
    pub reference_embeddings: Vec<PathBuf>,
    /// Precomputed `id<TAB>bits` scores used instead of decoding rasters.
    pub entropy_scores: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    /// Stage-I rule; baselines ignore it.
    pub entropy: Option<EntropyConfig>,
    pub cluster: ClusterSettings,
    pub budget: BudgetSpec,
    pub strategy: Strategy,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide. Never affects output.
    pub workers: usize,
    pub chunk_rows: usize,
}

/// Cluster settings before the per-stage seed is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSettings {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub init: InitMethod,
}

impl PipelineConfig {
    /// Cluster config for `stage`, seeded from the run seed.
    pub fn cluster_config(&self, stage: &str) -> ClusterConfig {
        ClusterConfig {
            k: self.cluster.k,
            seed: derive_seed(self.seed, stage),
            max_iters: self.cluster.max_iters,
            tol: self.cluster.tol,
            init: self.cluster.init,
        }
    }

    /// Canonical config text with every resolved value; feeding it back
    /// reproduces the run.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let p = &self.paths;
        let path = |p: &Path| p.display().to_string();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("paths.unlabeled_manifest", path(&p.unlabeled_manifest));
        kv("paths.unlabeled_embeddings", path(&p.unlabeled_embeddings));
        if !p.reference_embeddings.is_empty() {
            let refs: Vec<String> = p.reference_embeddings.iter().map(|r| path(r)).collect();
            kv("paths.reference_embeddings", refs.join(", "));
        }
        if let Some(e) = &p.entropy_scores {
            kv("paths.entropy_scores", path(e));
        }
        kv("paths.output_dir", path(&p.output_dir));
        if let Some(e) = &self.entropy {
            match e.rule {
                EntropyRule::TopFraction { keep_fraction } => {
                    kv("entropy.mode", "top_fraction".into());
                    kv("entropy.keep_fraction", format!("{keep_fraction:?}"));
                }
                EntropyRule::Threshold { tau } => {
                    kv("entropy.mode", "threshold".into());
                    kv("entropy.tau", format!("{tau:?}"));
                }
            }
            kv("entropy.levels", e.levels.to_string());
            kv("entropy.grayscale", e.grayscale.as_str().into());
        }
        kv("cluster.k", self.cluster.k.to_string());
        kv("cluster.max_iters", self.cluster.max_iters.to_string());
        kv("cluster.tol", format!("{:?}", self.cluster.tol));
        kv("cluster.init", self.cluster.init.as_str().into());
        match self.budget {
            BudgetSpec::PruningRatio(r) => kv("sampling.overall_pruning_ratio", format!("{r:?}")),
            BudgetSpec::Explicit(b) => kv("sampling.budget", b.to_string()),
        }
        kv("run.strategy", self.strategy.as_str().into());
        kv("run.seed", self.seed.to_string());
        kv("run.workers", self.workers.to_string());
        kv("run.chunk_rows", self.chunk_rows.to_string());
        s
    }
}

/// Key/value pairs as written, before defaults and validation.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut raw = RawConfig {
            values: BTreeMap::new(),
            base_dir: base_dir.to_path_buf(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if raw.values.contains_key(k) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
            }
            raw.set(k, v)?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    /// Sets one key, overriding any earlier value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Applies defaults and checks every constraint. Returns the config and
    /// one report line per applied default.
    pub fn resolve(&self) -> Result<(PipelineConfig, Vec<String>)> {
        let mut r = Resolver {
            raw: self,
            errors: Vec::new(),
            defaults: Vec::new(),
        };
        let cfg = r.build();
        if !r.errors.is_empty() {
            return Err(Error::ConfigItems(r.errors));
        }
        Ok((cfg.expect("no errors means a config"), r.defaults))
    }
}

struct Resolver<'a> {
    raw: &'a RawConfig,
    errors: Vec<String>,
    defaults: Vec<String>,
}

impl Resolver<'_> {
    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let v = self.raw.get(key)?;
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.errors.push(format!("{key}: cannot parse {v:?}"));
                None
            }
        }
    }

    fn or_default<T: std::str::FromStr + std::fmt::Display>(&mut self, key: &str, default: T) -> T {
        if self.raw.get(key).is_none() {
            self.defaults.push(format!("{key} = {default} (default)"));
            return default;
        }
        self.parsed(key).unwrap_or(default)
    }

    fn path(&mut self, key: &str, must_exist: bool) -> Option<PathBuf> {
        let v = self.raw.get(key)?;
        let p = self.raw.base_dir.join(v);
        if must_exist && !p.exists() {
            self.errors.push(format!("{key}: {} does not exist", p.display()));
        }
        Some(p)
    }

    fn required_path(&mut self, key: &str) -> PathBuf {
        self.path(key, true).unwrap_or_else(|| {
            self.errors.push(format!("{key} is required"));
            PathBuf::new()
        })
    }

    fn build(&mut self) -> Option<PipelineConfig> {
        let strategy: Strategy = self.or_default_str("run.strategy", "primary");
        let unlabeled_manifest = self.required_path("paths.unlabeled_manifest");
        let unlabeled_embeddings = self.required_path("paths.unlabeled_embeddings");
        let reference_embeddings: Vec<PathBuf> = match self.raw.get("paths.reference_embeddings") {
            Some(list) => list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let p = self.raw.base_dir.join(s);
                    if !p.exists() {
                        self.errors
                            .push(format!("paths.reference_embeddings: {} does not exist", p.display()));
                    }
                    p
                })
                .collect(),
            None => Vec::new(),
        };
        let needs_reference = matches!(
            strategy,
            Strategy::Primary | Strategy::Baseline(BaselineStrategy::ModerateDs)
        );
        if needs_reference && reference_embeddings.is_empty() {
            self.errors.push(format!(
                "paths.reference_embeddings is required for strategy {}",
                strategy.as_str()
            ));
        }
        let entropy_scores = self.path("paths.entropy_scores", true);
        let output_dir = self.path("paths.output_dir", false).unwrap_or_else(|| {
            self.errors.push("paths.output_dir is required".into());
            PathBuf::new()
        });

        let entropy = if strategy == Strategy::Primary {
            self.entropy()
        } else {
            None
        };

        let cluster = ClusterSettings {
            k: self.or_default("cluster.k", DEFAULT_K),
            max_iters: self.or_default("cluster.max_iters", DEFAULT_MAX_ITERS),
            tol: self.or_default("cluster.tol", DEFAULT_TOL),
            init: self.or_default_str("cluster.init", InitMethod::default().as_str()),
        };
        if cluster.k == 0 {
            self.errors.push("cluster.k must be >= 1".into());
        }
        if cluster.max_iters == 0 {
            self.errors.push("cluster.max_iters must be >= 1".into());
        }
        if !(cluster.tol >= 0.0 && cluster.tol.is_finite()) {
            self.errors.push("cluster.tol must be >= 0".into());
        }

        let ratio: Option<f64> = self.parsed("sampling.overall_pruning_ratio");
        let explicit: Option<usize> = self.parsed("sampling.budget");
        let budget = match (ratio, explicit) {
            (Some(_), Some(_)) => {
                self.errors.push(
                    "give exactly one of sampling.overall_pruning_ratio and sampling.budget, not both".into(),
                );
                None
            }
            (Some(r), None) if r > 0.0 && r < 1.0 => Some(BudgetSpec::PruningRatio(r)),
            (Some(r), None) => {
                self.errors
                    .push(format!("sampling.overall_pruning_ratio must be in (0, 1), got {r}"));
                None
            }
            (None, Some(0)) => {
                self.errors.push("sampling.budget must be >= 1".into());
                None
            }
            (None, Some(b)) => Some(BudgetSpec::Explicit(b)),
            (None, None) => {
                let both_missing = self.raw.get("sampling.overall_pruning_ratio").is_none()
                    && self.raw.get("sampling.budget").is_none();
                if both_missing {
                    self.errors.push(
                        "one of sampling.overall_pruning_ratio or sampling.budget is required".into(),
                    );
                }
                None
            }
        };

        let seed = self.or_default("run.seed", 0u64);
        let workers = self.or_default("run.workers", 0usize);
        let chunk_rows = self.or_default("run.chunk_rows", DEFAULT_CHUNK_ROWS);
        if chunk_rows == 0 {
            self.errors.push("run.chunk_rows must be >= 1".into());
        }

        if !self.errors.is_empty() {
            return None;
        }
        Some(PipelineConfig {
            paths: PipelinePaths {
                unlabeled_manifest,
                unlabeled_embeddings,
                reference_embeddings,
                entropy_scores,
                output_dir,
            },
            entropy,
            cluster,
            budget: budget?,
            strategy,
            seed,
            workers,
            chunk_rows,
        })
    }

    fn or_default_str<T: std::str::FromStr>(&mut self, key: &str, default: &str) -> T
    where
        T::Err: std::fmt::Display,
    {
        let v = match self.raw.get(key) {
            Some(v) => v.to_string(),
            None => {
                self.defaults.push(format!("{key} = {default} (default)"));
                default.to_string()
            }
        };
        match v.parse() {
            Ok(x) => x,
            Err(e) => {
                self.errors.push(format!("{key}: {e}"));
                default.parse().ok().expect("defaults parse")
            }
        }
    }

    fn entropy(&mut self) -> Option<EntropyConfig> {
        let mode = self.or_default_str::<String>("entropy.mode", "top_fraction");
        let tau: Option<f64> = self.parsed("entropy.tau");
        let fraction: Option<f64> = self.parsed("entropy.keep_fraction");
        let rule = match mode.as_str() {
            "top_fraction" => {
                if tau.is_some() {
                    self.errors.push("entropy.tau is only used with entropy.mode = threshold".into());
                }
                match fraction {
                    Some(p) => Some(EntropyRule::TopFraction { keep_fraction: p }),
                    None => {
                        if self.raw.get("entropy.keep_fraction").is_none() {
                            self.errors.push(
                                "entropy.keep_fraction is required for entropy.mode = top_fraction".into(),
                            );
                        }
                        None
                    }
                }
            }
            "threshold" => {
                if fraction.is_some() {
                    self.errors
                        .push("entropy.keep_fraction is only used with entropy.mode = top_fraction".into());
                }
                match tau {
                    Some(t) => Some(EntropyRule::Threshold { tau: t }),
                    None => {
                        if self.raw.get("entropy.tau").is_none() {
                            self.errors
                                .push("entropy.tau is required for entropy.mode = threshold".into());
                        }
                        None
                    }
                }
            }
            other => {
                self.errors
                    .push(format!("entropy.mode must be top_fraction or threshold, got {other:?}"));
                None
            }
        };
        let levels = self.or_default("entropy.levels", DEFAULT_LEVELS);
        let grayscale: GrayscalePolicy =
            self.or_default_str("entropy.grayscale", GrayscalePolicy::default().as_str());
        let cfg = EntropyConfig {
            rule: rule?,
            levels,
            grayscale,
        };
        if let Err(e) = cfg.validate() {
            self.errors.push(e.to_string());
            return None;
        }
        Some(cfg)
    }
}

/// Parses, resolves and validates a config file.
pub fn validate_config(path: &Path) -> Result<(PipelineConfig, Vec<String>)> {
    RawConfig::load(path)?.resolve()
}
