//! CIR triplet benchmarks: CIRR and FashionIQ JSON layouts, plus an in-memory fixture.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::synthetic::{ShapeSpec, COLORS};
use super::ImageSource;
use crate::{Error, Result};

pub const SUBSET_SIZE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkFormat {
    Cirr,
    FashionIq,
    Fixture,
}

impl BenchmarkFormat {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cirr" => Ok(Self::Cirr),
            "fashioniq" => Ok(Self::FashionIq),
            "fixture" => Ok(Self::Fixture),
            other => Err(Error::Config(format!(
                "unknown benchmark {other:?}; expected cirr, fashioniq or fixture"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTriplet {
    pub query_id: String,
    pub query_image: ImageSource,
    pub query_text: String,
    pub target_id: String,
    /// Six curated candidates including the target.
    pub subset_ids: Option<Vec<String>>,
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub category: Option<String>,
    pub ids: Vec<String>,
    pub sources: Vec<ImageSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub split: String,
    pub triplets: Vec<EvalTriplet>,
    pub galleries: Vec<Gallery>,
    /// The benchmark's convention removes the query image from its own ranking.
    pub excludes_query_image: bool,
    /// Triplets dropped because an image or target could not be resolved.
    pub dropped: usize,
    /// Triplets kept for R@k but without a usable subset.
    pub subset_missing: usize,
}

impl Benchmark {
    pub fn gallery_for(&self, category: Option<&str>) -> Option<&Gallery> {
        self.galleries.iter().find(|g| g.category.as_deref() == category)
    }
}

fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_triplets(root: &Path, format: BenchmarkFormat, split: &str, categories: &[String]) -> Result<Benchmark> {
    match format {
        BenchmarkFormat::Cirr => load_cirr(root, split),
        BenchmarkFormat::FashionIq => load_fashioniq(root, split, categories),
        BenchmarkFormat::Fixture => Ok(fixture_benchmark(100, 0)),
    }
}

#[derive(Deserialize)]
struct CirrImgSet {
    #[serde(default)]
    members: Vec<String>,
}

#[derive(Deserialize)]
struct CirrEntry {
    reference: String,
    #[serde(default)]
    target_hard: Option<String>,
    caption: String,
    #[serde(default)]
    img_set: Option<CirrImgSet>,
}

fn existing_image(path: PathBuf) -> Option<ImageSource> {
    path.is_file().then_some(ImageSource::File(path))
}

fn load_cirr(root: &Path, split: &str) -> Result<Benchmark> {
    let captions: Vec<CirrEntry> = read_json(&root.join("captions").join(format!("cap.rc2.{split}.json")))?;
    let paths: HashMap<String, String> = read_json(&root.join("image_splits").join(format!("split.rc2.{split}.json")))?;
    let image_root = if root.join("img_raw").is_dir() { root.join("img_raw") } else { root.to_path_buf() };
    let mut names: Vec<&String> = paths.keys().collect();
    names.sort();
    let mut gallery = Gallery { category: None, ids: Vec::new(), sources: Vec::new() };
    let mut missing_images = 0;
    for name in names {
        match existing_image(image_root.join(&paths[name])) {
            Some(src) => {
                gallery.ids.push(name.clone());
                gallery.sources.push(src);
            }
            None => missing_images += 1,
        }
    }
    if missing_images > 0 {
        log::warn!("{missing_images} CIRR gallery images missing under {}", image_root.display());
    }
    let index: HashMap<&str, usize> = gallery.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut triplets = Vec::new();
    let (mut dropped, mut subset_missing) = (0, 0);
    for e in captions {
        let (Some(target), Some(&q)) = (e.target_hard.as_ref(), index.get(e.reference.as_str())) else {
            dropped += 1;
            continue;
        };
        if !index.contains_key(target.as_str()) {
            dropped += 1;
            continue;
        }
        let subset = e
            .img_set
            .map(|s| s.members)
            .filter(|m| m.len() == SUBSET_SIZE && m.contains(target) && m.iter().all(|id| index.contains_key(id.as_str())));
        if subset.is_none() {
            subset_missing += 1;
        }
        triplets.push(EvalTriplet {
            query_id: e.reference.clone(),
            query_image: gallery.sources[q].clone(),
            query_text: e.caption,
            target_id: target.clone(),
            subset_ids: subset,
            category: None,
        });
    }
    Ok(Benchmark {
        name: "cirr".into(),
        split: split.into(),
        triplets,
        galleries: vec![gallery],
        excludes_query_image: true,
        dropped,
        subset_missing,
    })
}

#[derive(Deserialize)]
struct FiqEntry {
    target: String,
    candidate: String,
    captions: Vec<String>,
}

pub const FASHIONIQ_CATEGORIES: [&str; 3] = ["dress", "shirt", "toptee"];

fn load_fashioniq(root: &Path, split: &str, categories: &[String]) -> Result<Benchmark> {
    let categories: Vec<String> = if categories.is_empty() {
        FASHIONIQ_CATEGORIES.iter().map(|s| s.to_string()).collect()
    } else {
        categories.to_vec()
    };
    let find = |id: &str| {
        ["png", "jpg", "jpeg"]
            .iter()
            .find_map(|ext| existing_image(root.join("images").join(format!("{id}.{ext}"))))
    };
    let mut galleries = Vec::new();
    let mut triplets = Vec::new();
    let mut dropped = 0;
    for cat in &categories {
        let entries: Vec<FiqEntry> = read_json(&root.join("captions").join(format!("cap.{cat}.{split}.json")))?;
        let ids: Vec<String> = read_json(&root.join("image_splits").join(format!("split.{cat}.{split}.json")))?;
        let mut gallery = Gallery { category: Some(cat.clone()), ids: Vec::new(), sources: Vec::new() };
        for id in ids {
            if let Some(src) = find(&id) {
                gallery.ids.push(id);
                gallery.sources.push(src);
            }
        }
        let known: HashSet<&str> = gallery.ids.iter().map(|s| s.as_str()).collect();
        for e in entries {
            let query = find(&e.candidate);
            match query {
                Some(src) if known.contains(e.target.as_str()) => triplets.push(EvalTriplet {
                    query_id: e.candidate,
                    query_image: src,
                    query_text: e.captions.join(" and "),
                    target_id: e.target,
                    subset_ids: None,
                    category: Some(cat.clone()),
                }),
                _ => dropped += 1,
            }
        }
        galleries.push(gallery);
    }
    Ok(Benchmark {
        name: "fashioniq".into(),
        split: split.into(),
        triplets,
        galleries,
        excludes_query_image: false,
        dropped,
        subset_missing: 0,
    })
}

/// Recoloring triplets over synthetic shapes: the target is the query shape in
/// the color named by the text.
pub fn fixture_benchmark(count: usize, seed: u64) -> Benchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F1C5);
    let mut specs: Vec<ShapeSpec> = Vec::new();
    let mut id_of: HashMap<ShapeSpec, usize> = HashMap::new();
    let mut intern = |s: ShapeSpec, specs: &mut Vec<ShapeSpec>| {
        *id_of.entry(s).or_insert_with(|| {
            specs.push(s);
            specs.len() - 1
        })
    };
    let mut raw = Vec::with_capacity(count);
    for i in 0..count {
        let reference = ShapeSpec::sample(seed, i);
        let mut color = rng.gen_range(0..COLORS.len() - 1);
        if color >= reference.color {
            color += 1;
        }
        let target = reference.with_color(color);
        let q = intern(reference, &mut specs);
        let t = intern(target, &mut specs);
        raw.push((q, t, COLORS[color].0));
    }
    // distractors so every subset can be filled
    for i in 0..count.max(SUBSET_SIZE) {
        intern(ShapeSpec::sample(seed.wrapping_add(1), i), &mut specs);
    }
    let ids: Vec<String> = (0..specs.len()).map(|i| format!("fx-{i:05}")).collect();
    let templates = ["make it {}", "is {} instead", "change the color to {}"];
    let triplets = raw
        .into_iter()
        .enumerate()
        .map(|(i, (q, t, color))| {
            let mut pool: Vec<usize> = (0..specs.len()).filter(|&j| j != q && j != t).collect();
            pool.shuffle(&mut rng);
            let mut subset: Vec<String> = pool[..SUBSET_SIZE - 1].iter().map(|&j| ids[j].clone()).collect();
            subset.insert(rng.gen_range(0..SUBSET_SIZE), ids[t].clone());
            EvalTriplet {
                query_id: ids[q].clone(),
                query_image: ImageSource::Synthetic(specs[q]),
                query_text: templates[i % templates.len()].replace("{}", color),
                target_id: ids[t].clone(),
                subset_ids: Some(subset),
                category: None,
            }
        })
        .collect();
    Benchmark {
        name: "fixture".into(),
        split: "val".into(),
        triplets,
        galleries: vec![Gallery {
            category: None,
            ids,
            sources: specs.into_iter().map(ImageSource::Synthetic).collect(),
        }],
        excludes_query_image: true,
        dropped: 0,
        subset_missing: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn png(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::new(4, 4).save(path).unwrap();
    }

    fn cirr_fixture(dir: &Path) {
        let ids = ["r0", "t0", "r1", "t1", "x0", "x1", "x2", "x3"];
        let split: HashMap<&str, String> = ids.iter().map(|id| (*id, format!("./dev/{id}.png"))).collect();
        for id in ids {
            png(&dir.join("img_raw/dev").join(format!("{id}.png")));
        }
        std::fs::create_dir_all(dir.join("image_splits")).unwrap();
        std::fs::create_dir_all(dir.join("captions")).unwrap();
        std::fs::write(dir.join("image_splits/split.rc2.val.json"), serde_json::to_string(&split).unwrap()).unwrap();
        let caps = json!([
            {"pairid": 0, "reference": "r0", "target_hard": "t0", "caption": "has two dogs",
             "img_set": {"id": 1, "members": ["r0", "t0", "x0", "x1", "x2", "x3"]}},
            {"pairid": 1, "reference": "r1", "target_hard": "t1", "caption": "is pulling a carriage",
             "img_set": {"id": 2, "members": ["t1", "x0"]}}
        ]);
        std::fs::write(dir.join("captions/cap.rc2.val.json"), serde_json::to_string_pretty(&caps).unwrap()).unwrap();
    }

    #[test]
    fn cirr_two_triplets_parse_exactly() {
        let dir = tempfile::tempdir().unwrap();
        cirr_fixture(dir.path());
        let b = load_triplets(dir.path(), BenchmarkFormat::Cirr, "val", &[]).unwrap();
        assert_eq!(b.triplets.len(), 2);
        assert_eq!(b.galleries[0].ids.len(), 8);
        let t = &b.triplets[0];
        assert_eq!((t.query_id.as_str(), t.target_id.as_str(), t.query_text.as_str()), ("r0", "t0", "has two dogs"));
        assert_eq!(t.subset_ids.as_ref().unwrap().len(), 6);
        assert_eq!(b.triplets[1].subset_ids, None);
        assert_eq!(b.subset_missing, 1);
        assert!(b.excludes_query_image);
    }

    #[test]
    fn malformed_json_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        cirr_fixture(dir.path());
        std::fs::write(dir.path().join("captions/cap.rc2.val.json"), "[\n  {\"reference\": }\n]").unwrap();
        match load_triplets(dir.path(), BenchmarkFormat::Cirr, "val", &[]) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fashioniq_category_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        for id in ["a", "b", "c"] {
            png(&d.join("images").join(format!("{id}.png")));
        }
        std::fs::create_dir_all(d.join("captions")).unwrap();
        std::fs::create_dir_all(d.join("image_splits")).unwrap();
        std::fs::write(d.join("image_splits/split.dress.val.json"), r#"["a", "b", "c"]"#).unwrap();
        std::fs::write(
            d.join("captions/cap.dress.val.json"),
            r#"[{"target": "b", "candidate": "a", "captions": ["is shorter", "has no sleeves"]},
                {"target": "zz", "candidate": "a", "captions": ["x"]}]"#,
        )
        .unwrap();
        let b = load_triplets(d, BenchmarkFormat::FashionIq, "val", &["dress".to_string()]).unwrap();
        assert_eq!(b.triplets.len(), 1);
        assert_eq!(b.triplets[0].category.as_deref(), Some("dress"));
        assert_eq!(b.triplets[0].query_text, "is shorter and has no sleeves");
        assert_eq!(b.dropped, 1);
        assert!(b.gallery_for(Some("dress")).is_some());
        assert!(!b.excludes_query_image);
    }

    #[test]
    fn fixture_invariants() {
        let b = fixture_benchmark(40, 3);
        let g = &b.galleries[0];
        let ids: HashSet<&String> = g.ids.iter().collect();
        assert_eq!(ids.len(), g.ids.len());
        for t in &b.triplets {
            assert!(ids.contains(&t.target_id));
            let s = t.subset_ids.as_ref().unwrap();
            assert_eq!(s.len(), SUBSET_SIZE);
            assert!(s.contains(&t.target_id));
            assert!(!s.contains(&t.query_id));
        }
        assert_eq!(fixture_benchmark(40, 3), b);
    }
}
