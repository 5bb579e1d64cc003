//! Stage I: grayscale Shannon entropy and low-information pruning.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::raster::{Raster, RasterSource};
use crate::textio::{fmt6, is_clean_field, open_lines, write_atomic};

pub const DEFAULT_LEVELS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrayscalePolicy {
    /// Rec.601 luma (0.299, 0.587, 0.114) over the first three bands for
    /// 3-band images, band mean for everything else.
    #[default]
    Auto,
    /// Rec.601 luma over the first three bands. Images with fewer than three
    /// bands use the band mean.
    Luma601,
    /// Mean of all bands.
    BandMean,
}

impl GrayscalePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            GrayscalePolicy::Auto => "auto",
            GrayscalePolicy::Luma601 => "luma_601",
            GrayscalePolicy::BandMean => "band_mean",
        }
    }
}

impl std::str::FromStr for GrayscalePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "luma_601" => Ok(Self::Luma601),
            "band_mean" => Ok(Self::BandMean),
            other => Err(format!("unknown grayscale policy {other:?}")),
        }
    }
}

/// Which records survive stage I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntropyRule {
    /// Keep records with `H >= tau` bits.
    Threshold { tau: f64 },
    /// Keep the `ceil(keep_fraction * N)` highest-entropy records.
    TopFraction { keep_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyConfig {
    pub rule: EntropyRule,
    pub levels: usize,
    pub grayscale: GrayscalePolicy,
}

impl EntropyConfig {
    pub fn threshold(tau: f64) -> Self {
        Self {
            rule: EntropyRule::Threshold { tau },
            levels: DEFAULT_LEVELS,
            grayscale: GrayscalePolicy::Auto,
        }
    }

    pub fn top_fraction(keep_fraction: f64) -> Self {
        Self {
            rule: EntropyRule::TopFraction { keep_fraction },
            levels: DEFAULT_LEVELS,
            grayscale: GrayscalePolicy::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.levels > 1 << 16 {
            return Err(Error::Config(format!(
                "entropy levels must be in [2, 65536], got {}",
                self.levels
            )));
        }
        match self.rule {
            EntropyRule::Threshold { tau } if !(tau >= 0.0 && tau.is_finite()) => Err(
                Error::Config(format!("entropy tau must be a finite value >= 0, got {tau}")),
            ),
            EntropyRule::TopFraction { keep_fraction }
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) =>
            {
                Err(Error::Config(format!(
                    "entropy keep_fraction must be in (0, 1], got {keep_fraction}"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Validation(format!(
                "histogram needs at least 2 levels, got {}",
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(Self { counts, total })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn levels(&self) -> usize {
        self.counts.len()
    }
}

/// Gray level of one pixel in `0..=max_value`, rounded half up.
#[inline]
fn gray_level(px: &[u16], policy: GrayscalePolicy) -> u32 {
    let use_luma = match policy {
        GrayscalePolicy::Auto => px.len() == 3,
        GrayscalePolicy::Luma601 => px.len() >= 3,
        GrayscalePolicy::BandMean => false,
    };
    if use_luma {
        let weighted = 299 * px[0] as u64 + 587 * px[1] as u64 + 114 * px[2] as u64;
        ((weighted + 500) / 1000) as u32
    } else {
        let n = px.len() as u64;
        let sum: u64 = px.iter().map(|&v| v as u64).sum();
        ((sum + n / 2) / n) as u32
    }
}

/// Histogram of the grayscale reduction over `config.levels` bins. Gray levels
/// are linearly quantized: `bin = level * L / (max_value + 1)`.
pub fn grayscale_histogram(image: &Raster, config: &EntropyConfig) -> Result<Histogram> {
    if image.pixel_count() == 0 || image.bands == 0 {
        return Err(Error::Degenerate(format!(
            "raster {}x{}x{} has no pixels",
            image.width, image.height, image.bands
        )));
    }
    let levels = config.levels as u64;
    let depth = image.max_value as u64 + 1;
    let mut counts = vec![0u64; config.levels];
    for px in image.pixels() {
        let g = gray_level(px, config.grayscale) as u64;
        counts[(g * levels / depth) as usize] += 1;
    }
    Histogram::from_counts(counts)
}

/// Shannon entropy in bits, `-sum p_k log2 p_k` over non-empty levels.
pub fn shannon_entropy(h: &Histogram) -> Result<f64> {
    if h.total == 0 {
        return Err(Error::Degenerate("histogram is empty".into()));
    }
    let total = h.total as f64;
    let bits = h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let c = c as f64;
            (c / total) * (total / c).log2()
        })
        .sum::<f64>();
    Ok(bits)
}

pub fn image_entropy(image: &Raster, config: &EntropyConfig) -> Result<f64> {
    shannon_entropy(&grayscale_histogram(image, config)?)
}

/// `ceil(fraction * n)`, snapping products within float noise of an integer
/// (so `0.3 * 10` keeps 3, not 4).
pub fn keep_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

/// Indices kept by `rule` given per-record scores (`None` = undecodable,
/// always pruned). Returned in ascending index order.
pub fn select_by_rule(ids: &[&str], scores: &[Option<f64>], rule: EntropyRule) -> Vec<usize> {
    match rule {
        EntropyRule::Threshold { tau } => scores
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Some(h) if *h >= tau))
            .map(|(i, _)| i)
            .collect(),
        EntropyRule::TopFraction { keep_fraction } => {
            let mut ranked: Vec<(usize, f64)> = scores
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.map(|h| (i, h)))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(ids[b.0])));
            let k = keep_count(keep_fraction, scores.len()).min(ranked.len());
            let mut keep: Vec<usize> = ranked[..k].iter().map(|&(i, _)| i).collect();
            keep.sort_unstable();
            keep
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyOutcome {
    pub kept: DatasetManifest,
    /// Scores for every decodable record, in manifest order.
    pub scores: Vec<(String, f64)>,
    /// `(id, reason)` for records that could not be scored.
    pub rejects: Vec<(String, String)>,
}

/// Scores every record and applies the stage-I rule. Undecodable rasters are
/// reported as rejects and pruned; they never abort the run.
pub fn entropy_filter<S: RasterSource + ?Sized>(
    manifest: &DatasetManifest,
    config: &EntropyConfig,
    source: &S,
) -> Result<EntropyOutcome> {
    config.validate()?;
    let results: Vec<Result<f64>> = manifest
        .records
        .par_iter()
        .map(|r| image_entropy(&source.load(r)?, config))
        .collect();
    let mut scores = Vec::with_capacity(results.len());
    let mut rejects = Vec::new();
    let mut flat = Vec::with_capacity(results.len());
    for (rec, res) in manifest.records.iter().zip(results) {
        match res {
            Ok(h) => {
                scores.push((rec.id.clone(), h));
                flat.push(Some(h));
            }
            Err(e) => {
                rejects.push((rec.id.clone(), e.to_string()));
                flat.push(None);
            }
        }
    }
    let kept = apply_scores(manifest, &flat, config.rule);
    Ok(EntropyOutcome {
        kept,
        scores,
        rejects,
    })
}

/// Applies the stage-I rule to precomputed per-record scores.
pub fn apply_scores(
    manifest: &DatasetManifest,
    scores: &[Option<f64>],
    rule: EntropyRule,
) -> DatasetManifest {
    let ids: Vec<&str> = manifest.ids().collect();
    let keep = select_by_rule(&ids, scores, rule);
    let mut it = keep.into_iter().peekable();
    manifest.filter_indexed(|i| {
        if it.peek() == Some(&i) {
            it.next();
            true
        } else {
            false
        }
    })
}

pub fn write_scores(scores: &[(String, f64)], path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        for (id, h) in scores {
            writeln!(w, "{id}\t{}", fmt6(*h))?;
        }
        Ok(())
    })
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once('\t')
            .and_then(|(id, v)| v.parse::<f64>().ok().map(|v| (id.to_string(), v)));
        match parsed {
            Some(p) => out.push(p),
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: "expected id<TAB>entropy_bits".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_rejects(rejects: &[(String, String)], path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        for (id, reason) in rejects {
            let reason: String = reason
                .chars()
                .map(|c| if is_clean_field(c.encode_utf8(&mut [0; 4])) { c } else { ' ' })
                .collect();
            writeln!(w, "{id}\t{reason}")?;
        }
        Ok(())
    })
}
