//! Nearest-centroid assignment and per-cluster candidate pools.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::cluster::CentroidSet;
use crate::embedding::{l2_normalize_in_place, EmbeddingMatrix, EmbeddingReader, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::linalg::argmax_dot;
use crate::textio::{fmt6, open_lines, write_atomic};

/// Rows per chunk when streaming embeddings from disk.
pub const DEFAULT_CHUNK_ROWS: usize = 1 << 16;

/// Label and similarity of the best centroid for every row. Similarities are
/// clamped to [-1, 1].
pub fn nearest_rows(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f64>) {
    data.par_chunks_exact(dim)
        .map(|row| {
            let (k, s) = argmax_dot(row, centroids, dim);
            (k as u32, s.clamp(-1.0, 1.0))
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentTable {
    pub ids: Vec<String>,
    pub labels: Vec<u32>,
    pub sims: Vec<f64>,
    pub k: usize,
}

impl AssignmentTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.ids.len() || self.sims.len() != self.ids.len() {
            return Err(Error::Alignment("assignment columns differ in length".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.k) {
            return Err(Error::Validation(format!("label {l} out of range for k = {}", self.k)));
        }
        Ok(())
    }

    fn extend(&mut self, other: AssignmentTable) {
        self.ids.extend(other.ids);
        self.labels.extend(other.labels);
        self.sims.extend(other.sims);
    }
}

fn check_compatible(m: &EmbeddingMatrix, c: &CentroidSet) -> Result<()> {
    if m.dim() != c.dim() {
        return Err(Error::DimMismatch {
            expected: c.dim(),
            actual: m.dim(),
        });
    }
    Ok(())
}

/// Assigns each row to the centroid of highest cosine similarity, breaking
/// ties toward the smaller cluster index.
pub fn assign_nearest(m: &EmbeddingMatrix, c: &CentroidSet) -> Result<AssignmentTable> {
    check_compatible(m, c)?;
    m.check_unit_norm(UNIT_NORM_TOL)?;
    c.check_unit_norm(UNIT_NORM_TOL)?;
    let (labels, sims) = nearest_rows(m.data(), m.dim(), c.data());
    Ok(AssignmentTable {
        ids: m.ids().to_vec(),
        labels,
        sims,
        k: c.k(),
    })
}

/// Streams an embedding file in row chunks, assigning only the rows whose id
/// passes `keep`. Rows are normalized first when `normalize` is set. Output
/// follows file order.
pub fn assign_file(
    path: &Path,
    c: &CentroidSet,
    chunk_rows: usize,
    normalize: bool,
    keep: impl Fn(&str) -> bool,
) -> Result<AssignmentTable> {
    c.check_unit_norm(UNIT_NORM_TOL)?;
    let mut reader = EmbeddingReader::open(path)?;
    let mut table = AssignmentTable {
        ids: Vec::new(),
        labels: Vec::new(),
        sims: Vec::new(),
        k: c.k(),
    };
    while let Some(chunk) = reader.next_chunk(chunk_rows)? {
        let wanted: Vec<usize> = (0..chunk.len()).filter(|&i| keep(&chunk.ids()[i])).collect();
        if wanted.is_empty() {
            continue;
        }
        let mut part = if wanted.len() == chunk.len() {
            chunk
        } else {
            chunk.select_rows(&wanted)
        };
        if normalize {
            l2_normalize_in_place(&mut part)?;
        }
        table.extend(assign_nearest(&part, c)?);
    }
    reader.finish()?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub sim: f64,
}

/// Similarity descending, then id ascending.
pub fn by_priority(a: &PoolEntry, b: &PoolEntry) -> Ordering {
    b.sim.total_cmp(&a.sim).then_with(|| a.id.cmp(&b.id))
}

/// One pool per cluster, each sorted by [`by_priority`].
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePools {
    pub pools: Vec<Vec<PoolEntry>>,
}

impl CandidatePools {
    pub fn k(&self) -> usize {
        self.pools.len()
    }

    pub fn total(&self) -> usize {
        self.pools.iter().map(Vec::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.pools.iter().map(Vec::len).collect()
    }
}

pub fn pool_by_cluster(t: &AssignmentTable) -> Result<CandidatePools> {
    t.validate()?;
    let mut pools: Vec<Vec<PoolEntry>> = vec![Vec::new(); t.k];
    for ((id, &l), &sim) in t.ids.iter().zip(&t.labels).zip(&t.sims) {
        pools[l as usize].push(PoolEntry { id: id.clone(), sim });
    }
    pools.par_iter_mut().for_each(|p| p.sort_by(by_priority));
    Ok(CandidatePools { pools })
}

/// Writes `id<TAB>label<TAB>sim` with six-decimal similarities.
pub fn write_assignments(t: &AssignmentTable, path: &Path) -> Result<()> {
    write_table(t, path, |s| fmt6(s))
}

/// Same layout, with round-trip exact similarities.
pub fn write_assignments_exact(t: &AssignmentTable, path: &Path) -> Result<()> {
    write_table(t, path, |s| format!("{s:?}"))
}

fn write_table(t: &AssignmentTable, path: &Path, fmt: impl Fn(f64) -> String) -> Result<()> {
    t.validate()?;
    write_atomic(path, |w| {
        for ((id, l), s) in t.ids.iter().zip(&t.labels).zip(&t.sims) {
            writeln!(w, "{id}\t{l}\t{}", fmt(*s))?;
        }
        Ok(())
    })
}

/// Reads an assignment file. Without `k`, it is taken as `max label + 1`.
pub fn read_assignments(path: &Path, k: Option<usize>) -> Result<AssignmentTable> {
    let mut t = AssignmentTable {
        ids: Vec::new(),
        labels: Vec::new(),
        sims: Vec::new(),
        k: 0,
    };
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = (f.len() == 3)
            .then(|| Some((f[1].parse::<u32>().ok()?, f[2].parse::<f64>().ok()?)))
            .flatten();
        let (l, s) = parsed.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: "expected id<TAB>label<TAB>sim".into(),
        })?;
        t.ids.push(f[0].to_string());
        t.labels.push(l);
        t.sims.push(s);
    }
    let inferred = t.labels.iter().max().map_or(0, |&m| m as usize + 1);
    t.k = k.unwrap_or(inferred);
    t.validate()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(labels: &[u32], sims: &[f64], k: usize) -> AssignmentTable {
        AssignmentTable {
            ids: (0..labels.len()).map(|i| format!("x{i}")).collect(),
            labels: labels.to_vec(),
            sims: sims.to_vec(),
            k,
        }
    }

    #[test]
    fn self_similarity_and_basis_example() {
        let c = CentroidSet::from_rows(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = EmbeddingMatrix::new(vec!["x".into()], 2, vec![0.6, 0.8]).unwrap();
        let t = assign_nearest(&m, &c).unwrap();
        // cluster indices are 0-based: the second basis vector is label 1
        assert_eq!(t.labels, [1]);
        assert!((t.sims[0] - 0.8).abs() < 1e-7);

        let c = CentroidSet::from_rows(3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0.6, 0.8, 0.]).unwrap();
        let m = EmbeddingMatrix::new(vec!["mu3".into()], 3, c.centroid(3).to_vec()).unwrap();
        let t = assign_nearest(&m, &c).unwrap();
        assert_eq!(t.labels, [3]);
        assert!((t.sims[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn dim_mismatch_and_unnormalized() {
        let c = CentroidSet::from_rows(2, vec![1.0, 0.0]).unwrap();
        let m = EmbeddingMatrix::new(vec!["x".into()], 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(assign_nearest(&m, &c), Err(Error::DimMismatch { .. })));
        let m = EmbeddingMatrix::new(vec!["x".into()], 2, vec![2.0, 0.0]).unwrap();
        assert!(matches!(assign_nearest(&m, &c), Err(Error::Precondition(_))));
    }

    #[test]
    fn pools_partition_and_sort() {
        let t = table(&[0, 0, 1, 1, 1], &[0.1, 0.9, 0.5, 0.7, 0.5], 2);
        let p = pool_by_cluster(&t).unwrap();
        assert_eq!(p.sizes(), [2, 3]);
        let ids: Vec<_> = p.pools[1].iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["x3", "x2", "x4"]);
        assert_eq!(p.pools[0][0].id, "x1");
    }

    #[test]
    fn single_label_fills_one_pool() {
        let t = table(&[2, 2, 2], &[0.3, 0.2, 0.1], 4);
        let p = pool_by_cluster(&t).unwrap();
        assert_eq!(p.sizes(), [0, 0, 3, 0]);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let t = table(&[0, 5], &[0.1, 0.2], 2);
        assert!(pool_by_cluster(&t).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        let t = table(&[0, 3, 1], &[0.5, -0.25, 0.125], 4);
        write_assignments(&t, &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "x0\t0\t0.500000\nx1\t3\t-0.250000\nx2\t1\t0.125000\n"
        );
        assert_eq!(read_assignments(&p, Some(4)).unwrap(), t);
        let t2 = table(&[0], &[0.1234567891234], 1);
        write_assignments_exact(&t2, &p).unwrap();
        assert_eq!(read_assignments(&p, None).unwrap(), t2);
    }
}
