//! Caption-image pair datasets and triplet benchmarks.

pub mod cache;
pub mod preprocess;
pub mod synthetic;
pub mod triplets;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Image, Preprocessing};
use crate::{Error, Result, Scalar};

pub use preprocess::{preprocess_image, preprocess_rgb, to_rgb};
pub use synthetic::ShapeSpec;
pub use triplets::{load_triplets, Benchmark, BenchmarkFormat, EvalTriplet, Gallery};

/// Where an image's pixels come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    File(PathBuf),
    Synthetic(ShapeSpec),
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::File(p) => write!(f, "{}", p.display()),
            Self::Synthetic(s) => write!(f, "synthetic:{}-{}", s.color_name(), s.shape_name()),
        }
    }
}

impl ImageSource {
    pub fn load<T: Scalar>(&self, prep: &Preprocessing) -> Result<Image<T>> {
        match self {
            Self::File(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                preprocess_image(&bytes, prep, &p.display().to_string())
            }
            Self::Synthetic(s) => Ok(preprocess_rgb(&s.render(), prep)),
        }
    }

    /// Reads only the image header.
    fn probe(&self) -> std::result::Result<(), DropReason> {
        match self {
            Self::File(p) => {
                if !p.is_file() {
                    return Err(DropReason::MissingFile);
                }
                image::ImageReader::open(p)
                    .and_then(|r| r.with_guessed_format())
                    .map_err(|_| DropReason::Undecodable)?
                    .into_dimensions()
                    .map(|_| ())
                    .map_err(|_| DropReason::Undecodable)
            }
            Self::Synthetic(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    BadLine,
    EmptyCaption,
    MissingFile,
    NotCached,
    Undecodable,
}

impl DropReason {
    pub fn code(self) -> &'static str {
        match self {
            Self::BadLine => "bad_line",
            Self::EmptyCaption => "empty_caption",
            Self::MissingFile => "missing_file",
            Self::NotCached => "not_cached",
            Self::Undecodable => "undecodable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropRecord {
    pub line: usize,
    pub locator: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropReport {
    pub entries: Vec<DropRecord>,
}

impl DropReport {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.reason.code()).or_default() += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    /// 1-based manifest line, or sample index for synthetic data.
    pub line: usize,
    pub caption: String,
    pub source: ImageSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairDataset {
    pub name: String,
    pub records: Vec<PairRecord>,
    pub drops: DropReport,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Visiting order for an epoch: a seeded shuffle, different each epoch.
    pub fn order(&self, seed: u64, epoch: u32) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(epoch) + 1).wrapping_mul(0xA076_1D64_78BD_642F));
        idx.shuffle(&mut rng);
        idx
    }

    /// In-memory colored-shape pairs.
    pub fn synthetic(count: usize, seed: u64) -> Self {
        let records = (0..count)
            .map(|i| {
                let spec = ShapeSpec::sample(seed, i);
                PairRecord { line: i + 1, caption: spec.caption(), source: ImageSource::Synthetic(spec) }
            })
            .collect();
        Self { name: format!("synthetic:{count}:{seed}"), records, drops: DropReport::default() }
    }
}

/// Parses `synthetic:<n>[:seed]`.
pub fn parse_synthetic(spec: &str) -> Option<Result<(usize, u64)>> {
    let rest = spec.strip_prefix("synthetic:")?;
    let mut parts = rest.split(':');
    let bad = || Error::Config(format!("data.manifest {spec:?} must look like synthetic:<count>[:<seed>]"));
    let parsed = (|| {
        let n = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let seed = match parts.next() {
            Some(s) => s.parse().map_err(|_| bad())?,
            None => 0,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok((n, seed))
    })();
    Some(parsed)
}

/// Loads a `caption<TAB>path_or_url` manifest. Relative paths resolve against
/// the manifest's directory; URLs must already be in the cache.
pub fn load_pairs(manifest: &Path, limit: usize, cache_dir: Option<&Path>) -> Result<PairDataset> {
    if let Some(parsed) = parse_synthetic(&manifest.to_string_lossy()) {
        let (n, seed) = parsed?;
        return Ok(PairDataset::synthetic(n.min(limit), seed));
    }
    let text = std::fs::read_to_string(manifest).map_err(|e| {
        Error::Config(format!("cannot read data.manifest {}: {e}", manifest.display()))
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let cache = cache::cache_root(cache_dir, base);
    let mut records = Vec::new();
    let mut drops = DropReport::default();
    for (i, line) in text.lines().enumerate() {
        if records.len() >= limit {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let Some((caption, locator)) = line.split_once('\t') else {
            drops.entries.push(DropRecord { line: line_no, locator: line.to_string(), reason: DropReason::BadLine });
            continue;
        };
        let (caption, locator) = (caption.trim(), locator.trim());
        let drop = |reason| DropRecord { line: line_no, locator: locator.to_string(), reason };
        if caption.is_empty() {
            drops.entries.push(drop(DropReason::EmptyCaption));
            continue;
        }
        let source = if cache::is_url(locator) {
            let p = cache::cache_path(&cache, locator);
            if !p.is_file() {
                drops.entries.push(drop(DropReason::NotCached));
                continue;
            }
            ImageSource::File(p)
        } else {
            let p = Path::new(locator);
            ImageSource::File(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
        };
        if let Err(reason) = source.probe() {
            drops.entries.push(drop(reason));
            continue;
        }
        records.push(PairRecord { line: line_no, caption: caption.to_string(), source });
    }
    Ok(PairDataset { name: manifest.display().to_string(), records, drops })
}

/// Writes a synthetic dataset to disk as PNGs plus a TSV manifest.
pub fn write_synthetic(dir: &Path, count: usize, seed: u64) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let spec = ShapeSpec::sample(seed, i);
        let rel = format!("images/{i:06}.png");
        let path = dir.join(&rel);
        spec.render().save(&path).map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
        manifest.push_str(&format!("{}\t{rel}\n", spec.caption()));
    }
    let path = dir.join("pairs.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_line_fixture(dir: &Path, broken: bool) -> PathBuf {
        write_synthetic(dir, 3, 1).unwrap();
        if broken {
            std::fs::write(dir.join("images/000001.png"), b"garbage").unwrap();
        }
        dir.join("pairs.tsv")
    }

    #[test]
    fn all_readable() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_pairs(&three_line_fixture(dir.path(), false), 250_000, None).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.drops.is_empty());
        let img: Image<f32> = d.records[0].source.load(&Preprocessing { resolution: 8, mean: [0.5; 3], std: [0.5; 3] }).unwrap();
        assert_eq!(img.shape(), &[8, 8, 3]);
    }

    #[test]
    fn broken_image_is_dropped_once() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_pairs(&three_line_fixture(dir.path(), true), 250_000, None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.drops.entries, vec![DropRecord { line: 2, locator: "images/000001.png".into(), reason: DropReason::Undecodable }]);
    }

    #[test]
    fn reasons_and_limit() {
        let dir = tempfile::tempdir().unwrap();
        three_line_fixture(dir.path(), false);
        let m = dir.path().join("mixed.tsv");
        std::fs::write(
            &m,
            "no tab here\n\t images/000000.png\na dog\tmissing.png\na cat\thttp://example.com/x.jpg\na cow\timages/000002.png\na hen\timages/000000.png\n",
        )
        .unwrap();
        let d = load_pairs(&m, 1, Some(&dir.path().join("nocache"))).unwrap();
        assert_eq!(d.len(), 1);
        let codes: Vec<_> = d.drops.entries.iter().map(|e| (e.line, e.reason)).collect();
        assert_eq!(
            codes,
            vec![(1, DropReason::BadLine), (2, DropReason::EmptyCaption), (3, DropReason::MissingFile), (4, DropReason::NotCached)]
        );
        assert_eq!(d.drops.counts()["not_cached"], 1);
    }

    #[test]
    fn missing_manifest_is_config_error() {
        assert!(load_pairs(Path::new("/nonexistent/pairs.tsv"), 10, None).unwrap_err().is_config());
    }

    #[test]
    fn synthetic_manifest_values() {
        let d = load_pairs(Path::new("synthetic:5:3"), 250_000, None).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(load_pairs(Path::new("synthetic:5:3"), 2, None).unwrap().len(), 2);
        assert!(load_pairs(Path::new("synthetic:x"), 2, None).unwrap_err().is_config());
    }

    #[test]
    fn epoch_orders_are_seeded_and_reshuffled() {
        let d = PairDataset::synthetic(50, 0);
        assert_eq!(d.order(1, 0), d.order(1, 0));
        assert_ne!(d.order(1, 0), d.order(1, 1));
        let mut o = d.order(1, 3);
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
