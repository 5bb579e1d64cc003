//! Dataset manifests and selection files.
//!
//! A manifest is a tab-separated text file with one sample per line:
//!
//! ```text
//! id  uri  width  height  bands  [tag_key  tag_value]...
//! ```
//!
//! Unknown dimensions are written as `0`. Records keep file order through every
//! stage, and ids are opaque caller-supplied tokens.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::textio::{fmt_opt6, is_clean_field, open_lines, write_atomic};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    pub bands: u32,
    pub tags: Vec<(String, String)>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            width: 0,
            height: 0,
            bands: 0,
            tags: Vec::new(),
        }
    }

    fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(format!("expected at least 5 fields, found {}", fields.len()));
        }
        if (fields.len() - 5) % 2 != 0 {
            return Err("tag fields must come in key/value pairs".into());
        }
        if fields[0].is_empty() {
            return Err("empty id".into());
        }
        let num = |name: &str, s: &str| {
            s.parse::<u32>()
                .map_err(|_| format!("{name} must be a non-negative integer, got {s:?}"))
        };
        let tags = fields[5..]
            .chunks_exact(2)
            .map(|kv| (kv[0].to_string(), kv[1].to_string()))
            .collect();
        Ok(Self {
            id: fields[0].to_string(),
            uri: fields[1].to_string(),
            width: num("width", fields[2])?,
            height: num("height", fields[3])?,
            bands: num("bands", fields[4])?,
            tags,
        })
    }

    fn check_writable(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("record with empty id".into()));
        }
        let clean = is_clean_field(&self.id)
            && is_clean_field(&self.uri)
            && self
                .tags
                .iter()
                .all(|(k, v)| is_clean_field(k) && is_clean_field(v));
        if !clean {
            return Err(Error::Validation(format!(
                "record {:?} has a field containing a tab or newline",
                self.id
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SampleRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.id, self.uri, self.width, self.height, self.bands
        )?;
        for (k, v) in &self.tags {
            write!(f, "\t{k}\t{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub source_label: String,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting empty or duplicate ids.
    pub fn new(records: Vec<SampleRecord>, source_label: impl Into<String>) -> Result<Self> {
        let m = Self {
            records,
            source_label: source_label.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.id.is_empty() {
                return Err(Error::Validation("record with empty id".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Sub-manifest of the records whose index passes `keep`, in original order.
    pub fn filter_indexed(&self, mut keep: impl FnMut(usize) -> bool) -> DatasetManifest {
        DatasetManifest {
            records: self
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, r)| r.clone())
                .collect(),
            source_label: self.source_label.clone(),
        }
    }
}

/// Streams records from a manifest without holding the whole file.
///
/// Duplicate detection is left to the caller; `load_manifest` does it.
pub struct ManifestReader<R> {
    inner: std::io::Lines<R>,
    path: std::path::PathBuf,
    line: usize,
}

impl ManifestReader<BufReader<std::fs::File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufReader::new(f), path))
    }
}

impl<R: BufRead> ManifestReader<R> {
    pub fn new(reader: R, path: &Path) -> Self {
        Self {
            inner: reader.lines(),
            path: path.to_path_buf(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for ManifestReader<R> {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.inner.next()?;
            self.line += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            // blank lines (e.g. a trailing one) carry no record
            if line.trim().is_empty() {
                continue;
            }
            return Some(SampleRecord::parse_line(&line).map_err(|message| Error::Parse {
                path: self.path.clone(),
                line: self.line,
                message,
            }));
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for rec in ManifestReader::open(path)? {
        let rec = rec?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    let source_label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(DatasetManifest {
        records,
        source_label,
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    for r in &manifest.records {
        r.check_writable()?;
    }
    write_atomic(path, |w| {
        for r in &manifest.records {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Entropy,
    ClusterSample,
    Baseline,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Entropy => "entropy",
            Stage::ClusterSample => "cluster_sample",
            Stage::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "entropy" => Ok(Stage::Entropy),
            "cluster_sample" => Ok(Stage::ClusterSample),
            "baseline" => Ok(Stage::Baseline),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// One selected sample plus where its selection came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionEntry {
    pub id: String,
    pub stage: Stage,
    pub cluster: Option<u32>,
    pub rank_in_cluster: Option<u64>,
    pub similarity: Option<f64>,
    pub entropy_bits: Option<f64>,
}

impl SelectionEntry {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || !is_clean_field(&self.id) {
            return Err(Error::Validation(format!(
                "selection entry has an invalid id {:?}",
                self.id
            )));
        }
        if self.stage == Stage::ClusterSample
            && (self.cluster.is_none() || self.rank_in_cluster.is_none() || self.similarity.is_none())
        {
            return Err(Error::Validation(format!(
                "entry {:?}: cluster_sample entries need cluster, rank_in_cluster and similarity",
                self.id
            )));
        }
        if let Some(s) = self.similarity {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!(
                    "entry {:?}: similarity {s} outside [-1, 1]",
                    self.id
                )));
            }
        }
        if let Some(h) = self.entropy_bits {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(Error::Validation(format!(
                    "entry {:?}: entropy {h} is not a finite non-negative value",
                    self.id
                )));
            }
        }
        Ok(())
    }

    fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, found {}", f.len()));
        }
        fn opt<T: FromStr>(name: &str, s: &str) -> std::result::Result<Option<T>, String> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| format!("bad {name} field {s:?}"))
            }
        }
        Ok(Self {
            id: f[0].to_string(),
            stage: f[1].parse()?,
            cluster: opt("cluster", f[2])?,
            rank_in_cluster: opt("rank_in_cluster", f[3])?,
            similarity: opt("similarity", f[4])?,
            entropy_bits: opt("entropy_bits", f[5])?,
        })
    }
}

impl fmt::Display for SelectionEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".to_string());
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.stage,
            opt(self.cluster.map(|c| c.to_string())),
            opt(self.rank_in_cluster.map(|r| r.to_string())),
            fmt_opt6(self.similarity),
            fmt_opt6(self.entropy_bits),
        )
    }
}

/// Validates every entry, then writes the selection atomically.
pub fn write_selection(selection: &[SelectionEntry], path: &Path) -> Result<()> {
    for e in selection {
        e.validate()?;
    }
    write_atomic(path, |w| {
        for e in selection {
            writeln!(w, "{e}")?;
        }
        Ok(())
    })
}

pub fn read_selection(path: &Path) -> Result<Vec<SelectionEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let e = SelectionEntry::parse_line(&line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        out.push(e);
    }
    Ok(out)
}

/// Checks that every selected id exists in `manifest`.
pub fn check_selection_ids(selection: &[SelectionEntry], manifest: &DatasetManifest) -> Result<()> {
    let ids: HashSet<&str> = manifest.ids().collect();
    match selection.iter().find(|e| !ids.contains(e.id.as_str())) {
        Some(e) => Err(Error::Validation(format!(
            "selected id {:?} is not in the input manifest",
            e.id
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn rec(id: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            uri: format!("/data/{id}.tif"),
            width: 256,
            height: 256,
            bands: 3,
            tags: vec![("region".into(), "eu".into())],
        }
    }

    #[test]
    fn loads_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(
            &p,
            "b\t/x/b.png\t10\t10\t1\na\t/x/a.png\t0\t0\t0\tsplit\ttrain\nc\ts3://bucket/c\t5\t6\t4\n",
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        let ids: Vec<_> = m.ids().collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(m.records[1].tags, vec![("split".into(), "train".into())]);
        assert_eq!(m.records[2].bands, 4);
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let mut body = String::new();
        for i in 1..=10 {
            // line 4 and line 9 both carry img_007
            let id = if i == 4 || i == 9 { "img_007".to_string() } else { format!("img_{i:03}") };
            body.push_str(&format!("{id}\t/x/{i}.png\t0\t0\t0\n"));
        }
        fs::write(&p, body).unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(&err, Error::DuplicateId(id) if id == "img_007"));
        assert!(err.to_string().contains("img_007"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "a\tu\t1\t1\t1\nb\tu\tx\t1\t1\n").unwrap();
        match load_manifest(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        fs::write(&p, "a\tu\t1\t1\t1\tdangling\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "a\tu\t-1\t1\t1\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn manifest_write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let m = DatasetManifest::new(vec![rec("x1"), rec("x0")], "m").unwrap();
        write_manifest(&m, &p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    fn entries(n: usize) -> Vec<SelectionEntry> {
        (0..n)
            .map(|i| SelectionEntry {
                id: format!("s{i:04}"),
                stage: if i % 3 == 0 { Stage::Baseline } else { Stage::ClusterSample },
                cluster: if i % 3 == 0 { None } else { Some((i % 7) as u32) },
                rank_in_cluster: if i % 3 == 0 { None } else { Some(i as u64 / 7) },
                similarity: if i % 3 == 0 { None } else { Some((i as f64 * 9973.0 % 1e6) / 1e6) },
                entropy_bits: if i % 2 == 0 { Some(i as f64 / 16.0) } else { None },
            })
            .collect()
    }

    #[test]
    fn selection_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        let sel = entries(100);
        write_selection(&sel, &a).unwrap();
        write_selection(&sel, &b).unwrap();
        assert_eq!(read_selection(&a).unwrap(), sel);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn absent_fields_are_dashes() {
        let e = SelectionEntry {
            id: "a".into(),
            stage: Stage::Entropy,
            cluster: None,
            rank_in_cluster: None,
            similarity: None,
            entropy_bits: Some(7.25),
        };
        assert_eq!(e.to_string(), "a\tentropy\t-\t-\t-\t7.250000");
    }

    #[test]
    fn cluster_sample_without_similarity_is_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sel.tsv");
        let mut sel = entries(5);
        sel[1].similarity = None;
        assert!(matches!(write_selection(&sel, &p), Err(Error::Validation(_))));
        assert!(!p.exists());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let sel = entries(2);
        let err = write_selection(&sel, Path::new("/nonexistent-dir/x/sel.tsv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn selection_ids_must_exist() {
        let m = DatasetManifest::new(vec![rec("s0000"), rec("s0001")], "m").unwrap();
        let sel = entries(2);
        check_selection_ids(&sel, &m).unwrap();
        let sel = entries(3);
        assert!(check_selection_ids(&sel, &m).is_err());
    }
}
