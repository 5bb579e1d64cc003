use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geoprune::embedding::read_embeddings;
use geoprune::manifest::{read_selection, write_manifest, DatasetManifest, SampleRecord};

fn geoprune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoprune"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Synthetic embeddings from `synth`, plus one small grayscale PNG per row
/// and a config pointing at all of it (relative paths).
struct Fixture {
    dir: tempfile::TempDir,
    n: usize,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let o = geoprune(
            dir.path(),
            &[
                "synth", "--n", &n.to_string(), "--dim", "8", "--k-true", "6", "--imbalance", "1.2",
                "--output", "corpus.bin", "--reference-size", "300", "--reference-output", "reference.bin",
                "--seed", "4",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));

        let ids = read_embeddings(&dir.path().join("corpus.bin")).unwrap().ids().to_vec();
        fs::create_dir(dir.path().join("img")).unwrap();
        let records = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                // entropy grows with i % 9; i % 9 == 0 is flat
                let span = (i % 9) as u32 * 28 + 1;
                let img = image::GrayImage::from_fn(8, 8, |x, y| image::Luma([((x * 31 + y * 17 + i as u32 * 7) % span) as u8]));
                let path = dir.path().join("img").join(format!("{id}.png"));
                img.save(&path).unwrap();
                SampleRecord::new(id.clone(), path.display().to_string())
            })
            .collect();
        write_manifest(&DatasetManifest::new(records, "fixture").unwrap(), &dir.path().join("manifest.tsv")).unwrap();
        fs::write(
            dir.path().join("run.cfg"),
            "# fixture\n\
             paths.unlabeled_manifest = manifest.tsv\n\
             paths.unlabeled_embeddings = corpus.bin\n\
             paths.reference_embeddings = reference.bin\n\
             paths.output_dir = out\n\
             entropy.keep_fraction = 0.3\n\
             sampling.overall_pruning_ratio = 0.85\n\
             cluster.k = 12\n\
             run.seed = 7\n",
        )
        .unwrap();
        Fixture { dir, n }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        geoprune(self.dir.path(), args)
    }
}

#[test]
fn validate_lists_defaults() {
    let f = Fixture::new(100);
    let o = f.run(&["validate", "--config", "run.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("config ok: strategy primary"), "{out}");
    assert!(out.contains("cluster.max_iters"), "{out}");
}

#[test]
fn config_errors_exit_2() {
    let f = Fixture::new(100);
    let o = f.run(&["validate", "--config", "run.cfg", "--set", "cluster.kk=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cluster.kk"), "{}", stderr(&o));

    let o = f.run(&["pipeline", "--config", "run.cfg", "--set", "paths.unlabeled_manifest=nope.tsv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.tsv"));

    let o = f.run(&["pipeline"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pipeline_runs_and_resumes() {
    let f = Fixture::new(1000);
    let o = f.run(&["pipeline", "--config", "run.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("selected      150"), "{}", stdout(&o));
    assert_eq!(read_selection(&f.path("out/selection.tsv")).unwrap().len(), 150);

    let o = f.run(&["pipeline", "--config", "run.cfg"]);
    assert!(stdout(&o).contains("resumed       entropy, centroids, assign"), "{}", stdout(&o));

    // --out-dir is taken relative to the working directory
    let o = f.run(&["pipeline", "--config", "run.cfg", "--out-dir", "elsewhere", "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(f.path("out/selection.tsv")).unwrap(),
        fs::read(f.path("elsewhere/selection.tsv")).unwrap()
    );
}

#[test]
fn infeasible_budget_exits_4() {
    let f = Fixture::new(200);
    let o = f.run(&["pipeline", "--config", "run.cfg", "--set", "entropy.keep_fraction=0.05"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("keep fraction"), "{}", stderr(&o));
}

#[test]
fn corrupt_embeddings_exit_3() {
    let f = Fixture::new(200);
    let mut bytes = fs::read(f.path("corpus.bin")).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(f.path("corpus.bin"), bytes).unwrap();
    let o = f.run(&["pipeline", "--config", "run.cfg"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn stage_commands_reproduce_the_pipeline() {
    let f = Fixture::new(1000);
    let o = f.run(&["pipeline", "--config", "run.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let steps: [&[&str]; 4] = [
        &["entropy", "--manifest", "manifest.tsv", "--keep-fraction", "0.3", "--out-dir", "steps"],
        &["cluster", "--reference", "reference.bin", "--k", "12", "--seed", "7", "--output", "steps/c.bin"],
        &[
            "assign", "--embeddings", "corpus.bin", "--centroids", "steps/c.bin", "--manifest",
            "steps/kept_manifest.tsv", "--output", "steps/a.tsv",
        ],
        &[
            "sample", "--assignments", "steps/a.tsv", "--k", "12", "--pruning-ratio", "0.85", "--original-size",
            &f.n.to_string(), "--scores", "steps/entropy_scores.tsv", "--output", "steps/selection.tsv",
        ],
    ];
    for s in steps {
        let o = f.run(s);
        assert_eq!(code(&o), 0, "{s:?}: {}", stderr(&o));
    }
    assert_eq!(
        fs::read(f.path("steps/kept_manifest.tsv")).unwrap(),
        fs::read(f.path("out/kept_manifest.tsv")).unwrap()
    );
    assert_eq!(
        read_selection(&f.path("steps/selection.tsv")).unwrap(),
        read_selection(&f.path("out/selection.tsv")).unwrap()
    );
    assert!(f.path("steps/selection.stats.tsv").exists());
}

#[test]
fn baselines_from_the_same_config() {
    let f = Fixture::new(600);
    for s in ["random", "moderate_ds", "cluster_nearest"] {
        let out = format!("b_{s}");
        let o = f.run(&["baseline", "--strategy", s, "--config", "run.cfg", "--out-dir", &out]);
        assert_eq!(code(&o), 0, "{s}: {}", stderr(&o));
        assert_eq!(read_selection(&f.path(&out).join("selection.tsv")).unwrap().len(), 90);
    }
    let o = f.run(&["baseline", "--strategy", "nope", "--config", "run.cfg"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_output_is_unit_norm() {
    let dir = tempfile::tempdir().unwrap();
    let o = geoprune(dir.path(), &["synth", "--n", "50", "--dim", "5", "--k-true", "3", "--output", "s.bin"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = read_embeddings(&dir.path().join("s.bin")).unwrap();
    assert_eq!((m.len(), m.dim()), (50, 5));
    for r in m.rows() {
        let norm: f64 = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
