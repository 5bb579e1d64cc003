//! Small helpers shared by the line-oriented file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};

/// Writes a file by streaming into a temp file in the target directory and
/// renaming it into place, so readers never observe a partial file.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

/// Formats an optional real with six decimals, `-` when absent.
pub fn fmt_opt6(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt6(x),
        None => "-".to_string(),
    }
}

/// Six-decimal formatting that never emits `-0.000000`.
pub fn fmt6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

pub fn is_clean_field(s: &str) -> bool {
    !s.contains(['\t', '\n', '\r'])
}

/// Writes `key<TAB>value` lines.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        if !is_clean_field(k) || !is_clean_field(v) {
            return Err(Error::Validation(format!(
                "key/value {k:?} contains a tab or newline"
            )));
        }
    }
    write_atomic(path, |w| {
        for (k, v) in pairs {
            writeln!(w, "{k}\t{v}")?;
        }
        Ok(())
    })
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: "expected key<TAB>value".into(),
        })?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
