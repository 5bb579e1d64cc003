//! Embedding matrices and their binary interchange format.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 8    | magic `PRNFRG01`              |
//! | 8      | 4    | version (`u32`, = 1)          |
//! | 12     | 8    | row count N (`u64`)           |
//! | 20     | 4    | dimension f_d (`u32`)         |
//! | 24     | 4    | reserved (`u32`, = 0)         |
//! | 28     | 4·N·f_d | row-major `f32` payload    |
//!
//! Row ids live in a sidecar `<path>.ids`, one UTF-8 id per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::textio::{is_clean_field, write_atomic};

pub const MAGIC: &[u8; 8] = b"PRNFRG01";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 28;

/// Rows must be within this distance of unit norm to count as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be >= 1".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Alignment(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            dim,
            data: Vec::new(),
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn into_parts(self) -> (Vec<String>, usize, Vec<f32>) {
        (self.ids, self.dim, self.data)
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            dim: self.dim,
            data,
        }
    }

    /// Stacks matrices of equal dimension. Ids must stay unique.
    pub fn concat(parts: Vec<EmbeddingMatrix>) -> Result<EmbeddingMatrix> {
        let dim = match parts.first() {
            Some(p) => p.dim,
            None => return Err(Error::Validation("nothing to concatenate".into())),
        };
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for p in parts {
            if p.dim != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: p.dim,
                });
            }
            ids.extend(p.ids);
            data.extend(p.data);
        }
        EmbeddingMatrix::new(ids, dim, data)
    }

    /// Errors if any row is further than `tol` from unit norm.
    pub fn check_unit_norm(&self, tol: f64) -> Result<()> {
        let bad = self
            .data
            .par_chunks_exact(self.dim)
            .position_first(|r| !((norm(r) - 1.0).abs() <= tol));
        match bad {
            Some(i) => Err(Error::Precondition(format!(
                "row {:?} has norm {} (expected 1 ± {tol}); normalize embeddings first",
                self.ids[i],
                norm(self.row(i))
            ))),
            None => Ok(()),
        }
    }
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = m.clone();
    l2_normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn l2_normalize_in_place(m: &mut EmbeddingMatrix) -> Result<()> {
    let norms: Vec<f64> = m.data.par_chunks_exact(m.dim).map(norm).collect();
    if let Some(i) = norms.iter().position(|n| !(*n >= 1e-12 && n.is_finite())) {
        return Err(Error::Degenerate(format!(
            "embedding {:?} has norm {}; the extractor likely failed on this sample",
            m.ids[i], norms[i]
        )));
    }
    m.data
        .par_chunks_exact_mut(m.dim)
        .zip(norms.par_iter())
        .for_each(|(row, &n)| {
            for v in row {
                *v = (*v as f64 / n) as f32;
            }
        });
    Ok(())
}

pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Exact on-disk size of an `n × dim` matrix file (excluding the id sidecar).
pub fn encoded_len(n: u64, dim: u32) -> u64 {
    HEADER_LEN + 4 * n * dim as u64
}

fn encode_header(n: u64, dim: u32) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[0..8].copy_from_slice(MAGIC);
    h[8..12].copy_from_slice(&VERSION.to_le_bytes());
    h[12..20].copy_from_slice(&n.to_le_bytes());
    h[20..24].copy_from_slice(&dim.to_le_bytes());
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub rows: u64,
    pub dim: u32,
}

fn decode_header(h: &[u8; HEADER_LEN as usize]) -> Result<Header> {
    if &h[0..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&h[0..8]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let word = |r: std::ops::Range<usize>| u32::from_le_bytes(h[r].try_into().unwrap());
    let version = word(8..12);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let rows = u64::from_le_bytes(h[12..20].try_into().unwrap());
    let dim = word(20..24);
    if word(24..28) != 0 {
        return Err(Error::Format("reserved header field is not zero".into()));
    }
    if dim == 0 {
        return Err(Error::Format("dimension is zero".into()));
    }
    Ok(Header { rows, dim })
}

/// Writes matrix and id sidecar. With `require_unit_norm`, rows must already
/// be normalized; pass `false` for raw extractor dumps.
pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path, require_unit_norm: bool) -> Result<()> {
    if m.data.len() != m.ids.len() * m.dim {
        return Err(Error::Validation("id count does not match row count".into()));
    }
    let dim = u32::try_from(m.dim)
        .map_err(|_| Error::Validation(format!("dimension {} too large", m.dim)))?;
    if let Some(id) = m.ids.iter().find(|id| id.is_empty() || !is_clean_field(id)) {
        return Err(Error::Validation(format!("id {id:?} is empty or has a tab/newline")));
    }
    if require_unit_norm {
        m.check_unit_norm(1e-5)?;
    }
    write_atomic(path, |w| {
        w.write_all(&encode_header(m.len() as u64, dim))?;
        let mut buf = Vec::with_capacity(1 << 16);
        for chunk in m.data.chunks(1 << 14) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    })?;
    write_atomic(&ids_path(path), |w| {
        for id in &m.ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let mut reader = EmbeddingReader::open(path)?;
    let n = usize::try_from(reader.header.rows)
        .map_err(|_| Error::Corruption("row count does not fit in memory".into()))?;
    let m = reader
        .next_chunk(n)?
        .unwrap_or_else(|| EmbeddingMatrix::empty(reader.header.dim as usize));
    reader.finish()?;
    Ok(m)
}

/// Streams row ranges of an embedding file together with their ids.
pub struct EmbeddingReader {
    path: PathBuf,
    header: Header,
    data: BufReader<File>,
    ids: std::io::Lines<BufReader<File>>,
    next_row: u64,
}

impl EmbeddingReader {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut data = BufReader::with_capacity(1 << 20, f);
        let mut h = [0u8; HEADER_LEN as usize];
        if len < HEADER_LEN {
            return Err(Error::Format(format!(
                "{}: file of {len} bytes is shorter than the header",
                path.display()
            )));
        }
        data.read_exact(&mut h).map_err(|e| Error::io(path, e))?;
        let header = decode_header(&h)?;
        let expected = header
            .rows
            .checked_mul(4 * header.dim as u64)
            .and_then(|p| p.checked_add(HEADER_LEN));
        if expected != Some(len) {
            let payload_rows = (len - HEADER_LEN) as f64 / (4.0 * header.dim as f64);
            return Err(Error::Corruption(format!(
                "{}: header declares {} rows of dim {} but the payload holds {payload_rows} rows",
                path.display(),
                header.rows,
                header.dim
            )));
        }
        let ip = ids_path(path);
        let idf = File::open(&ip).map_err(|e| Error::io(&ip, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            data,
            ids: BufReader::new(idf).lines(),
            next_row: 0,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    /// Reads up to `max_rows` rows. `None` once every row has been read.
    pub fn next_chunk(&mut self, max_rows: usize) -> Result<Option<EmbeddingMatrix>> {
        let left = self.header.rows - self.next_row;
        if left == 0 {
            return Ok(None);
        }
        let rows = (max_rows.max(1) as u64).min(left) as usize;
        let dim = self.dim();
        let mut bytes = vec![0u8; rows * dim * 4];
        self.data
            .read_exact(&mut bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut ids = Vec::with_capacity(rows);
        for _ in 0..rows {
            match self.ids.next() {
                Some(Ok(id)) => ids.push(id),
                Some(Err(e)) => return Err(Error::io(ids_path(&self.path), e)),
                None => {
                    return Err(Error::Alignment(format!(
                        "{} has fewer ids than the {} rows in the header",
                        ids_path(&self.path).display(),
                        self.header.rows
                    )))
                }
            }
        }
        self.next_row += rows as u64;
        Ok(Some(EmbeddingMatrix { ids, dim, data }))
    }

    /// Checks the id sidecar has no lines beyond the last row.
    pub fn finish(mut self) -> Result<()> {
        let extra = self
            .ids
            .by_ref()
            .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
            .count();
        if extra > 0 {
            return Err(Error::Alignment(format!(
                "{} has {extra} more ids than the {} rows in the header",
                ids_path(&self.path).display(),
                self.header.rows
            )));
        }
        Ok(())
    }
}
