//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use dashu_float::FBig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geoprune::assign::{AssignmentTable, CandidatePools};
use geoprune::embedding::EmbeddingMatrix;
use geoprune::raster::Raster;

const ORACLE_BITS: usize = 192;

fn big(x: u64) -> FBig {
    FBig::from(x).with_precision(ORACLE_BITS).value()
}

/// Entropy in bits as `(T ln T - Σ c ln c) / (T ln 2)`, evaluated with
/// 192-bit floats. Never forms the probabilities the library works with.
pub fn entropy_oracle(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    assert!(total > 0);
    let t = big(total);
    let mut acc = &t * t.ln();
    for &c in counts.iter().filter(|&&c| c > 0) {
        let c = big(c);
        acc = acc - &c * c.ln();
    }
    let denom = t * big(2).ln();
    (acc / denom).to_f64().value()
}

/// Per-pixel histogram recomputation with explicit x/y/band loops.
pub fn histogram_oracle(r: &Raster, levels: usize, luma: bool) -> Vec<u64> {
    let mut counts = vec![0u64; levels];
    let b = r.bands as usize;
    for y in 0..r.height as usize {
        for x in 0..r.width as usize {
            let base = (y * r.width as usize + x) * b;
            let px = &r.data[base..base + b];
            let g: u64 = if luma {
                let w = 299 * px[0] as u64 + 587 * px[1] as u64 + 114 * px[2] as u64;
                // round half up of w / 1000
                let q = w / 1000;
                if w % 1000 >= 500 {
                    q + 1
                } else {
                    q
                }
            } else {
                let s: u64 = px.iter().map(|&v| v as u64).sum();
                let q = s / b as u64;
                if 2 * (s % b as u64) >= b as u64 {
                    q + 1
                } else {
                    q
                }
            };
            counts[(g * levels as u64 / (r.max_value as u64 + 1)) as usize] += 1;
        }
    }
    counts
}

pub fn random_raster(rng: &mut impl Rng, w: u32, h: u32, bands: u16) -> Raster {
    let n = (w * h) as usize * bands as usize;
    // Mix of full-range and low-variety images so both ends of the
    // entropy range get exercised.
    let span: u16 = *[2u16, 16, 256].get(rng.random_range(0..3)).unwrap();
    let data: Vec<u16> = (0..n).map(|_| rng.random_range(0..span)).collect();
    Raster::new(w, h, bands, 255, data).unwrap()
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut table: HashMap<(u32, u32), f64> = HashMap::new();
    let mut ra: HashMap<u32, f64> = HashMap::new();
    let mut rb: HashMap<u32, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Selection rules written out literally: quota `q = ⌊B/K⌋`, top-q per pool
/// (whole pool when smaller), then the highest-similarity leftovers across
/// all pools until `min(B, N)` are chosen.
pub fn sampling_oracle(pools: &[Vec<(String, f64)>], budget: usize) -> BTreeSet<String> {
    let k = pools.len();
    let q = budget / k;
    let n: usize = pools.iter().map(Vec::len).sum();
    let target = budget.min(n);
    let mut chosen = BTreeSet::new();
    let mut leftovers: Vec<(String, f64)> = Vec::new();
    for pool in pools {
        let mut sorted = pool.clone();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let take = q.min(sorted.len());
        for (id, _) in &sorted[..take] {
            chosen.insert(id.clone());
        }
        leftovers.extend(sorted[take..].iter().cloned());
    }
    leftovers.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let need = target - chosen.len();
    for (id, _) in leftovers.into_iter().take(need) {
        chosen.insert(id);
    }
    chosen
}

/// Random pools with sims drawn from a small grid so ties are common.
pub fn random_pools(rng: &mut impl Rng, k: usize, max_n: usize) -> Vec<Vec<(String, f64)>> {
    let n = rng.random_range(0..=max_n);
    let mut pools = vec![Vec::new(); k];
    for i in 0..n {
        let c = rng.random_range(0..k);
        let sim = rng.random_range(-10i32..=10) as f64 / 10.0;
        pools[c].push((format!("id{i:03}"), sim));
    }
    pools
}

pub fn to_candidate_pools(pools: &[Vec<(String, f64)>]) -> CandidatePools {
    let table = AssignmentTable {
        ids: pools.iter().flatten().map(|(id, _)| id.clone()).collect(),
        labels: pools
            .iter()
            .enumerate()
            .flat_map(|(c, p)| std::iter::repeat_n(c as u32, p.len()))
            .collect(),
        sims: pools.iter().flatten().map(|(_, s)| *s).collect(),
        k: pools.len(),
    };
    geoprune::assign::pool_by_cluster(&table).unwrap()
}

/// `n` random unit rows of width `dim`.
pub fn random_unit_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| (x / norm) as f32));
    }
    let ids = (0..n).map(|i| format!("r{i:06}")).collect();
    EmbeddingMatrix::new(ids, dim, data).unwrap()
}

/// Brute-force argmax over centroids: f64 dot, first maximum wins.
pub fn argmax_oracle(row: &[f32], centroids: &[f32], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let mut s = 0.0f64;
        for j in 0..dim {
            s += row[j] as f64 * c[j] as f64;
        }
        if s > best.1 {
            best = (k as u32, s);
        }
    }
    best
}

/// On-disk corpus: manifest, aligned unlabeled embeddings and a reference set.
pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub manifest: std::path::PathBuf,
    pub embeddings: std::path::PathBuf,
    pub reference: std::path::PathBuf,
    pub n: usize,
}

/// Deterministic 8×8 RGB content for record `i`; entropy varies with `i` and
/// every 10th image is flat.
pub fn fixture_raster(i: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(i.wrapping_mul(0x9e37_79b9));
    let span = if i % 10 == 3 { 1 } else { 2 + (i % 7) as u16 * 40 };
    let data: Vec<u16> = (0..8 * 8 * 3).map(|_| rng.random_range(0..span)).collect();
    Raster::new(8, 8, 3, 255, data).unwrap()
}

/// Raster source for `mem://<i>` uris.
pub fn memory_source(r: &geoprune::manifest::SampleRecord) -> geoprune::Result<Raster> {
    let i: u64 = r
        .uri
        .strip_prefix("mem://")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| geoprune::Error::Format(format!("not a memory uri: {}", r.uri)))?;
    Ok(fixture_raster(i))
}

/// Writes a Zipf-imbalanced corpus of `n` rows. With `pngs`, every record
/// points at a real PNG file; otherwise at a `mem://` uri.
pub fn write_corpus(n: usize, dim: usize, k_true: usize, seed: u64, pngs: bool) -> Corpus {
    use geoprune::bench::{generate_reference, generate_synthetic, SyntheticSpec};
    use geoprune::embedding::write_embeddings;
    use geoprune::manifest::{write_manifest, DatasetManifest, SampleRecord};

    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::new(n, dim, k_true, seed);
    spec.imbalance = 1.2;
    spec.noise_fraction = 0.05;
    let corpus = generate_synthetic(&spec).unwrap();
    let reference = generate_reference(&spec, (20 * k_true).max(400)).unwrap();

    let img_dir = dir.path().join("img");
    if pngs {
        std::fs::create_dir_all(&img_dir).unwrap();
    }
    let records: Vec<SampleRecord> = corpus
        .matrix
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let uri = if pngs {
                let r = fixture_raster(i as u64);
                let bytes: Vec<u8> = r.data.iter().map(|&v| v as u8).collect();
                let path = img_dir.join(format!("{id}.png"));
                image::RgbImage::from_raw(8, 8, bytes).unwrap().save(&path).unwrap();
                path.display().to_string()
            } else {
                format!("mem://{i}")
            };
            SampleRecord {
                width: 8,
                height: 8,
                bands: 3,
                ..SampleRecord::new(id.clone(), uri)
            }
        })
        .collect();
    let manifest = dir.path().join("corpus.tsv");
    write_manifest(&DatasetManifest::new(records, "corpus").unwrap(), &manifest).unwrap();
    let embeddings = dir.path().join("corpus.bin");
    write_embeddings(&corpus.matrix, &embeddings, true).unwrap();
    let reference_path = dir.path().join("reference.bin");
    write_embeddings(&reference.matrix, &reference_path, true).unwrap();
    Corpus {
        dir,
        manifest,
        embeddings,
        reference: reference_path,
        n,
    }
}

impl Corpus {
    /// Config text pointing at this corpus; `extra` lines are appended.
    pub fn config(&self, out: &str, extra: &str) -> String {
        format!(
            "paths.unlabeled_manifest = {}\npaths.unlabeled_embeddings = {}\n\
             paths.reference_embeddings = {}\npaths.output_dir = {}\n{extra}",
            self.manifest.display(),
            self.embeddings.display(),
            self.reference.display(),
            self.dir.path().join(out).display(),
        )
    }

    pub fn resolve(&self, out: &str, extra: &str) -> geoprune::Result<geoprune::config::PipelineConfig> {
        geoprune::config::RawConfig::parse(&self.config(out, extra), self.dir.path())?
            .resolve()
            .map(|(c, _)| c)
    }
}
