//! URL image cache and the opt-in ingestion step.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CACHE_ENV: &str = "CIRMASK_CACHE";

/// Configured directory, else `$CIRMASK_CACHE`, else `<base>/cache`.
pub fn cache_root(configured: Option<&Path>, base: &Path) -> PathBuf {
    if let Some(p) = configured {
        return p.to_path_buf();
    }
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => base.join("cache"),
    }
}

/// `<root>/<sha256(url)>.img`.
pub fn cache_path(root: &Path, url: &str) -> PathBuf {
    let digest = Sha256::digest(url.as_bytes());
    root.join(format!("{}.img", hex::encode(digest)))
}

pub fn is_url(locator: &str) -> bool {
    locator.starts_with("http://") || locator.starts_with("https://")
}

/// Byte source for remote images.
pub trait Fetch {
    fn fetch(&self, url: &str) -> Result<Vec<u8>>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub fetched: usize,
    pub already_cached: usize,
    pub local: usize,
    /// `(manifest line, url, message)`.
    pub failed: Vec<(usize, String, String)>,
}

/// Downloads every uncached URL of a manifest into the cache. Payloads that do
/// not decode as images are not written.
pub fn ingest(manifest: &Path, root: &Path, fetcher: &dyn Fetch, limit: usize) -> Result<IngestReport> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut report = IngestReport::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        if report.fetched + report.already_cached + report.local >= limit {
            break;
        }
        let Some((_, locator)) = line.split_once('\t') else { continue };
        let locator = locator.trim();
        if !is_url(locator) {
            report.local += 1;
            continue;
        }
        let target = cache_path(root, locator);
        if target.exists() {
            report.already_cached += 1;
            continue;
        }
        let outcome = fetcher.fetch(locator).and_then(|bytes| {
            image::guess_format(&bytes)
                .and_then(|_| image::load_from_memory(&bytes))
                .map_err(|e| Error::Decode { locator: locator.to_string(), message: e.to_string() })?;
            std::fs::write(&target, &bytes).map_err(|e| Error::io(&target, e))
        });
        match outcome {
            Ok(()) => report.fetched += 1,
            Err(e) => report.failed.push((i + 1, locator.to_string(), e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct MapFetch(HashMap<String, Vec<u8>>);

    impl Fetch for MapFetch {
        fn fetch(&self, url: &str) -> Result<Vec<u8>> {
            self.0.get(url).cloned().ok_or_else(|| Error::Fetch { url: url.into(), message: "404".into() })
        }
    }

    fn png() -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::RgbImage::new(4, 4).write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn cache_layout_is_hashed() {
        let p = cache_path(Path::new("/c"), "http://x/a.jpg");
        let name = p.file_name().unwrap().to_str().unwrap();
        assert_eq!(name.len(), 64 + 4);
        assert!(name.ends_with(".img"));
        assert_eq!(cache_root(Some(Path::new("/here")), Path::new("/base")), PathBuf::from("/here"));
    }

    #[test]
    fn ingest_fetches_validates_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("pairs.tsv");
        std::fs::write(
            &manifest,
            "a dog\thttp://h/1.png\na cat\thttp://h/2.png\na cow\thttp://h/3.png\na local\timg.png\n",
        )
        .unwrap();
        let fetcher = MapFetch(HashMap::from([
            ("http://h/1.png".to_string(), png()),
            ("http://h/2.png".to_string(), b"<html>".to_vec()),
        ]));
        let root = dir.path().join("cache");
        let r = ingest(&manifest, &root, &fetcher, 100).unwrap();
        assert_eq!((r.fetched, r.already_cached, r.local, r.failed.len()), (1, 0, 1, 2));
        assert!(cache_path(&root, "http://h/1.png").exists());
        assert!(!cache_path(&root, "http://h/2.png").exists());
        let again = ingest(&manifest, &root, &fetcher, 100).unwrap();
        assert_eq!(again.already_cached, 1);
    }
}
