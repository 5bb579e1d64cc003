use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geoprune::assign::{assign_file, pool_by_cluster, read_assignments, write_assignments, DEFAULT_CHUNK_ROWS};
use geoprune::bench::{
    compare_strategies, generate_reference, generate_synthetic, run_reference_vs_full, run_scaling_study,
    write_compare_csv, write_report, CompareConfig, ScalingConfig, SyntheticSpec,
};
use geoprune::cluster::{spherical_kmeans, write_centroids, ClusterConfig, InitMethod};
use geoprune::cluster::read_centroids;
use geoprune::config::RawConfig;
use geoprune::embedding::write_embeddings;
use geoprune::entropy::{entropy_filter, read_scores, write_rejects, write_scores, EntropyConfig, GrayscalePolicy};
use geoprune::manifest::{load_manifest, write_manifest, write_selection};
use geoprune::pipeline::{load_reference, run_pipeline};
use geoprune::raster::FileRasterSource;
use geoprune::sample::{compute_budget, stratified_select, write_stats};
use geoprune::seed::derive_seed;
use geoprune::{Error, Result};

#[derive(Parser)]
#[command(name = "geoprune", version, about = "Training-free two-stage pruning of image corpora")]
struct Cli {
    /// Pipeline config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides run.workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides paths.output_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and list every default it relies on.
    Validate,
    /// Run the full two-stage pipeline from a config.
    Pipeline,
    /// Run a comparison strategy from a config.
    Baseline {
        #[arg(long)]
        strategy: String,
    },
    /// Stage I only: score a manifest and keep the high-entropy part.
    Entropy(EntropyArgs),
    /// Learn prior centroids from reference embeddings.
    Cluster(ClusterArgs),
    /// Assign embeddings to their nearest centroid.
    Assign(AssignArgs),
    /// Quota-balanced selection from an assignment file.
    Sample(SampleArgs),
    /// Write a synthetic embedding corpus (and optional reference set).
    Synth(SynthArgs),
    /// Timing and quality benchmarks on synthetic data.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct EntropyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, conflicts_with = "tau", required_unless_present = "tau")]
    keep_fraction: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 256)]
    levels: usize,
    #[arg(long, default_value = "auto")]
    grayscale: GrayscalePolicy,
}

#[derive(Args)]
struct ClusterArgs {
    /// Reference embedding files, concatenated in order.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    reference: Vec<PathBuf>,
    #[arg(long, default_value_t = 200)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value = "kmeans_pp")]
    init: InitMethod,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    centroids: PathBuf,
    /// Only assign ids listed in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CHUNK_ROWS)]
    chunk_rows: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    assignments: PathBuf,
    /// Number of clusters; defaults to the largest label + 1.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, conflicts_with = "pruning_ratio", required_unless_present = "pruning_ratio")]
    budget: Option<usize>,
    #[arg(long, requires = "original_size")]
    pruning_ratio: Option<f64>,
    /// Corpus size before stage I, for --pruning-ratio.
    #[arg(long)]
    original_size: Option<usize>,
    /// Entropy scores to attach to the selection.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    k_true: usize,
    #[arg(long, default_value_t = 0.0)]
    imbalance: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, requires = "reference_output")]
    reference_size: Option<usize>,
    #[arg(long)]
    reference_output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Assignment and end-to-end time against corpus size.
    Scaling {
        #[arg(long, value_delimiter = ',', default_value = "100000,200000,400000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        k: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Reference-guided clustering against clustering the whole corpus.
    ReferenceVsFull {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 50_000)]
        reference_size: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        max_iters: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Coverage and redundancy of every strategy over several seeds.
    Compare {
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        k_true: usize,
        #[arg(long, default_value_t = 1.5)]
        imbalance: f64,
        #[arg(long, default_value_t = 200)]
        k: usize,
        #[arg(long, default_value_t = 0.85)]
        pruning_ratio: f64,
        #[arg(long, default_value_t = 5_000)]
        reference_size: usize,
        #[arg(long, default_value_t = 20)]
        trials: u64,
        #[arg(long, default_value_t = 30)]
        max_iters: usize,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out_dir
        .as_deref()
        .ok_or_else(|| Error::Config("--out-dir is required for this command".into()))
}

fn load_config(cli: &Cli, strategy: Option<&str>) -> Result<RawConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut raw = RawConfig::load(path)?;
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        raw.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        raw.set("run.seed", &s.to_string())?;
    }
    if let Some(w) = cli.workers {
        raw.set("run.workers", &w.to_string())?;
    }
    if let Some(d) = &cli.out_dir {
        // Relative paths in the config resolve against its directory, so
        // make the override absolute first.
        let abs = std::env::current_dir().map(|c| c.join(d)).unwrap_or_else(|_| d.clone());
        raw.set("paths.output_dir", &abs.display().to_string())?;
    }
    if let Some(s) = strategy {
        raw.set("run.strategy", s)?;
    }
    Ok(raw)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Validate => {
            let (cfg, defaults) = load_config(&cli, None)?.resolve()?;
            println!("config ok: strategy {}", cfg.strategy.as_str());
            for d in defaults {
                println!("  {d}");
            }
        }
        Command::Pipeline | Command::Baseline { .. } => {
            let strategy = match &cli.command {
                Command::Baseline { strategy } => Some(strategy.as_str()),
                _ => None,
            };
            let (cfg, defaults) = load_config(&cli, strategy)?.resolve()?;
            for d in &defaults {
                eprintln!("note: {d}");
            }
            let r = run_pipeline(&cfg, &FileRasterSource)?;
            println!("strategy      {}", r.selection.strategy);
            println!("original      {}", r.n_original);
            println!("after entropy {}", r.n_after_entropy);
            println!("rejected      {}", r.n_rejected);
            println!("budget        {}", r.budget);
            println!("selected      {}", r.selection.len());
            println!("reallocated   {}", r.selection.reallocated_count);
            if !r.resumed.is_empty() {
                println!("resumed       {}", r.resumed.join(", "));
            }
            println!("output        {}", r.output_dir.display());
        }
        Command::Entropy(a) => {
            let out = out_dir(&cli)?;
            std::fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.to_path_buf(),
                source: e,
            })?;
            let mut cfg = match (a.keep_fraction, a.tau) {
                (Some(p), _) => EntropyConfig::top_fraction(p),
                (None, Some(t)) => EntropyConfig::threshold(t),
                (None, None) => unreachable!("clap requires one of them"),
            };
            cfg.levels = a.levels;
            cfg.grayscale = a.grayscale;
            let manifest = load_manifest(&a.manifest)?;
            let o = with_workers(cli.workers, || entropy_filter(&manifest, &cfg, &FileRasterSource))?;
            write_manifest(&o.kept, &out.join("kept_manifest.tsv"))?;
            write_scores(&o.scores, &out.join("entropy_scores.tsv"))?;
            write_rejects(&o.rejects, &out.join("entropy_rejects.tsv"))?;
            println!(
                "kept {} of {} ({} rejected)",
                o.kept.len(),
                manifest.len(),
                o.rejects.len()
            );
        }
        Command::Cluster(a) => {
            let cfg = ClusterConfig {
                k: a.k,
                seed: derive_seed(seed, "cluster"),
                max_iters: a.max_iters,
                tol: a.tol,
                init: a.init,
            };
            let c = with_workers(cli.workers, || spherical_kmeans(&load_reference(&a.reference)?, &cfg))?;
            write_centroids(&c, &a.output)?;
            println!(
                "k {} dim {} iterations {} objective {:.6}",
                c.k(),
                c.dim(),
                c.meta.iterations,
                c.meta.objective
            );
        }
        Command::Assign(a) => {
            let centroids = read_centroids(&a.centroids)?;
            let keep: Option<HashSet<String>> = match &a.manifest {
                Some(m) => Some(load_manifest(m)?.ids().map(str::to_string).collect()),
                None => None,
            };
            let t = with_workers(cli.workers, || {
                assign_file(&a.embeddings, &centroids, a.chunk_rows, true, |id| {
                    keep.as_ref().is_none_or(|k| k.contains(id))
                })
            })?;
            if let Some(k) = &keep {
                if t.len() != k.len() {
                    let present: HashSet<&str> = t.ids.iter().map(String::as_str).collect();
                    let mut missing: Vec<String> =
                        k.iter().filter(|id| !present.contains(id.as_str())).cloned().collect();
                    missing.sort();
                    return Err(Error::MissingEmbeddings {
                        total: missing.len(),
                        shown: missing.into_iter().take(100).collect(),
                    });
                }
            }
            write_assignments(&t, &a.output)?;
            println!("assigned {} rows to {} centroids", t.len(), centroids.k());
        }
        Command::Sample(a) => {
            let t = read_assignments(&a.assignments, a.k)?;
            let budget = match (a.budget, a.pruning_ratio, a.original_size) {
                (Some(b), _, _) if b > t.len() => {
                    return Err(Error::Infeasible {
                        budget: b,
                        available: t.len(),
                    })
                }
                (Some(b), _, _) => b,
                (None, Some(r), Some(n)) => compute_budget(t.len(), r, n)?,
                _ => unreachable!("clap enforces the budget arguments"),
            };
            let mut sel = stratified_select(&pool_by_cluster(&t)?, budget)?;
            if let Some(p) = &a.scores {
                let bits: std::collections::HashMap<String, f64> = read_scores(p)?.into_iter().collect();
                for e in &mut sel.entries {
                    e.entropy_bits = bits.get(&e.id).copied();
                }
            }
            write_selection(&sel.entries, &a.output)?;
            let stats = a.output.with_extension("stats.tsv");
            write_stats(&sel, &stats)?;
            println!("selected {} (reallocated {})", sel.len(), sel.reallocated_count);
        }
        Command::Synth(a) => {
            let mut spec = SyntheticSpec::new(a.n, a.dim, a.k_true, seed);
            spec.imbalance = a.imbalance;
            spec.noise_fraction = a.noise;
            spec.validate()?;
            write_embeddings(&generate_synthetic(&spec)?.matrix, &a.output, true)?;
            if let (Some(n), Some(p)) = (a.reference_size, &a.reference_output) {
                write_embeddings(&generate_reference(&spec, n)?.matrix, p, true)?;
            }
            println!("wrote {} rows of dim {}", a.n, a.dim);
        }
        Command::Bench(b) => bench(b, seed, cli.workers)?,
    }
    Ok(())
}

fn bench(cmd: &BenchCommand, seed: u64, workers: Option<usize>) -> Result<()> {
    match cmd {
        BenchCommand::Scaling {
            sizes,
            k,
            dim,
            repeats,
            report,
        } => {
            let r = run_scaling_study(&ScalingConfig {
                sizes: sizes.clone(),
                k: *k,
                dim: *dim,
                seed,
                repeats: *repeats,
                workers: workers.unwrap_or(0),
            })?;
            write_report(&r.to_kv(), report)?;
            println!(
                "slope {:.3} r2 {:.4} k-doubling {:.3}",
                r.assign_slope, r.assign_r2, r.k_doubling_ratio
            );
        }
        BenchCommand::ReferenceVsFull {
            n,
            reference_size,
            dim,
            k,
            max_iters,
            report,
        } => {
            let mut spec = SyntheticSpec::new(*n, *dim, 100.min(*n), seed);
            spec.imbalance = 1.0;
            let corpus = generate_synthetic(&spec)?;
            let reference = generate_reference(&spec, *reference_size)?;
            let mut cfg = ClusterConfig::new(*k, derive_seed(seed, "cluster"));
            cfg.max_iters = *max_iters;
            let budget = ((*n as f64) * 0.15).round().max(1.0) as usize;
            let r = with_workers(workers, || {
                run_reference_vs_full(&corpus.matrix, &reference.matrix, &cfg, budget)
            })?;
            write_report(&r.to_kv(), report)?;
            println!("ratio {:.4}", r.ratio());
        }
        BenchCommand::Compare {
            n,
            dim,
            k_true,
            imbalance,
            k,
            pruning_ratio,
            reference_size,
            trials,
            max_iters,
            csv,
        } => {
            let mut rows = Vec::new();
            for t in 0..*trials {
                let mut spec = SyntheticSpec::new(*n, *dim, *k_true, seed.wrapping_add(t));
                spec.imbalance = *imbalance;
                let r = with_workers(workers, || {
                    compare_strategies(&CompareConfig {
                        corpus: spec,
                        reference_size: *reference_size,
                        k: *k,
                        pruning_ratio: *pruning_ratio,
                        max_iters: *max_iters,
                    })
                })?;
                rows.push((seed.wrapping_add(t), r));
            }
            write_compare_csv(&rows, csv)?;
            let wins = rows
                .iter()
                .filter(|(_, r)| {
                    let p = r.score("primary").map_or(0.0, |s| s.recall);
                    let q = r.score("random").map_or(1.0, |s| s.recall);
                    p > q
                })
                .count();
            println!("primary recall beat random in {wins}/{} trials", rows.len());
        }
    }
    Ok(())
}
