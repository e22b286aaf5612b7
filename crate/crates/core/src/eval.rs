//! Retrieval evaluation: query embedding, gallery indexing, ranking and recall.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, ImageBatch, Preprocessing, UNIT_NORM_TOL};
use crate::checkpoint::{read_container, write_container};
use crate::data::{Benchmark, EvalTriplet, Gallery};
use crate::inversion::{build_inference_query_fitted, InversionNetwork};
use crate::{Error, Result, Scalar};

const INDEX_KIND: &str = "gallery-index";
const ENCODE_CHUNK: usize = 64;

/// Embeds the reference image, inverts it and encodes "a photo of * , <text>".
///
/// Returns the unit query feature and whether query words were dropped to fit
/// the context.
pub fn embed_query<T: Scalar>(
    triplet: &EvalTriplet,
    net: &InversionNetwork<T>,
    backbone: &dyn Backbone<T>,
    prep: &Preprocessing,
) -> Result<(Array1<T>, bool)> {
    let image = triplet.query_image.load::<T>(prep)?;
    let feature = backbone.encode_image(&ImageBatch::from_images(&[image])?)?;
    let pseudo = net.forward(feature.vectors.view())?;
    let (query, dropped) = build_inference_query_fitted(backbone, pseudo.row(0), &triplet.query_text)?;
    if dropped {
        log::warn!("query text of {} truncated to fit the context", triplet.query_id);
    }
    let out = backbone.encode_embedded(&query.embedded, query.end_position())?;
    Ok((out.vectors.row(0).to_owned(), dropped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex<T> {
    pub ids: Vec<String>,
    /// `[G, D]`, unit rows.
    pub features: Array2<T>,
    pub fingerprint: String,
}

/// Identifies the backbone weights and gallery content an index was built from.
pub fn fingerprint<T: Scalar>(backbone: &dyn Backbone<T>, gallery: &Gallery) -> String {
    let mut h = Sha256::new();
    h.update(backbone.name().as_bytes());
    h.update(backbone.weights_checksum().as_bytes());
    h.update(T::DTYPE.as_bytes());
    for (id, src) in gallery.ids.iter().zip(&gallery.sources) {
        h.update(id.as_bytes());
        h.update([0]);
        h.update(src.to_string().as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..16])
}

impl<T: Scalar> GalleryIndex<T> {
    pub fn new(ids: Vec<String>, features: Array2<T>, fingerprint: String) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("gallery is empty".into()));
        }
        if ids.len() != features.nrows() {
            return Err(Error::dims("index rows", ids.len(), features.nrows()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidInput(format!("duplicate gallery id {dup}")));
        }
        for (i, row) in features.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt().to_f64_lossy();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::ContractViolation(format!("index row {i} has norm {n}")));
            }
        }
        Ok(Self { ids, features, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Inner products of `query` with every row, in f64.
    pub fn scores(&self, query: ArrayView1<T>) -> Vec<f64> {
        self.features.dot(&query).iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let features = self.features.clone().into_dyn();
        let meta = json!({ "fingerprint": self.fingerprint, "ids": self.ids });
        write_container(path, INDEX_KIND, meta, &[("features".to_string(), &features)])
    }

    /// Loads an index, refusing one built from different weights or images.
    pub fn load(path: &Path, expected_fingerprint: &str) -> Result<Self> {
        let (meta, tensors) = read_container::<T>(path, INDEX_KIND)?;
        let found = meta["fingerprint"].as_str().unwrap_or_default();
        if found != expected_fingerprint {
            return Err(Error::StaleIndex(format!(
                "{} has fingerprint {found}, expected {expected_fingerprint}",
                path.display()
            )));
        }
        let ids: Vec<String> = serde_json::from_value(meta["ids"].clone()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("bad id list: {e}"),
        })?;
        let features = tensors
            .into_iter()
            .find(|(n, _)| n == "features")
            .and_then(|(_, t)| t.into_dimensionality().ok())
            .ok_or_else(|| Error::Format { path: path.to_path_buf(), message: "missing 2-d features".into() })?;
        Self::new(ids, features, found.to_string())
    }
}

/// Encodes every gallery image.
pub fn build_index<T: Scalar>(gallery: &Gallery, backbone: &dyn Backbone<T>) -> Result<GalleryIndex<T>> {
    if gallery.ids.is_empty() {
        return Err(Error::InvalidInput("gallery is empty".into()));
    }
    let prep = backbone.preprocessing();
    let mut rows = Vec::with_capacity(gallery.ids.len());
    for chunk in gallery.sources.chunks(ENCODE_CHUNK) {
        let images = chunk.par_iter().map(|s| s.load::<T>(&prep)).collect::<Result<Vec<_>>>()?;
        let f = backbone.encode_image(&ImageBatch::from_images(&images)?)?;
        rows.extend(f.vectors.outer_iter().map(|r| r.to_owned()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let features = ndarray::stack(Axis(0), &views).expect("equal widths");
    GalleryIndex::new(gallery.ids.clone(), features, fingerprint(backbone, gallery))
}

/// Reuses the index at `path` when its fingerprint matches, else rebuilds and saves it.
pub fn load_or_build_index<T: Scalar>(
    gallery: &Gallery,
    backbone: &dyn Backbone<T>,
    path: Option<&Path>,
) -> Result<GalleryIndex<T>> {
    let Some(path) = path else { return build_index(gallery, backbone) };
    let fp = fingerprint(backbone, gallery);
    match GalleryIndex::load(path, &fp) {
        Ok(index) => return Ok(index),
        Err(Error::Io { .. }) => {}
        Err(Error::StaleIndex(msg)) => log::warn!("rebuilding stale index: {msg}"),
        Err(e) => return Err(e),
    }
    let index = build_index(gallery, backbone)?;
    index.save(path)?;
    Ok(index)
}

/// Candidate positions sorted by descending score, ties by ascending id.
fn order(scores: &[f64], ids: &[String], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    idx
}

/// Top `k` gallery ids by score. `exclude` removes one id (the query image).
pub fn rank_scores(scores: &[f64], ids: &[String], k: usize, exclude: Option<&str>) -> Vec<String> {
    let candidates = (0..ids.len()).filter(|&i| Some(ids[i].as_str()) != exclude);
    let ordered = order(scores, ids, candidates);
    if k > ordered.len() {
        log::warn!("k = {k} exceeds the {} ranked candidates; clamping", ordered.len());
    }
    ordered.into_iter().take(k).map(|i| ids[i].clone()).collect()
}

pub fn rank<T: Scalar>(query: ArrayView1<T>, index: &GalleryIndex<T>, k: usize) -> Vec<String> {
    rank_scores(&index.scores(query), &index.ids, k, None)
}

/// Ranking restricted to the members of `subset` that exist in the gallery.
pub fn rank_subset(scores: &[f64], ids: &[String], subset: &[String], exclude: Option<&str>) -> Vec<String> {
    let wanted: HashSet<&str> = subset.iter().map(String::as_str).filter(|s| Some(*s) != exclude).collect();
    let candidates = (0..ids.len()).filter(|&i| wanted.contains(ids[i].as_str()));
    order(scores, ids, candidates).into_iter().map(|i| ids[i].clone()).collect()
}

fn hit(ranking: &[String], target: &str, k: usize) -> bool {
    ranking.iter().take(k).any(|id| id == target)
}

/// Percentage of queries whose target is among the first `k` ranked ids.
pub fn recall_at_k(rankings: &[Vec<String>], targets: &[String], k: usize) -> Result<f64> {
    if rankings.len() != targets.len() {
        return Err(Error::dims("rankings per target", targets.len(), rankings.len()));
    }
    if rankings.is_empty() {
        return Err(Error::InvalidInput("no queries to score".into()));
    }
    let hits = rankings.iter().zip(targets).filter(|(r, t)| hit(r, t, k)).count();
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubsetRecall {
    pub value: f64,
    pub counted: usize,
    /// Queries without a subset.
    pub excluded: usize,
}

/// Recall within each query's candidate subset; `None` rankings are excluded.
pub fn recall_subset_at_k(rankings: &[Option<Vec<String>>], targets: &[String], k: usize) -> Result<SubsetRecall> {
    if rankings.len() != targets.len() {
        return Err(Error::dims("subset rankings per target", targets.len(), rankings.len()));
    }
    let present: Vec<_> = rankings.iter().zip(targets).filter_map(|(r, t)| r.as_ref().map(|r| (r, t))).collect();
    if present.is_empty() {
        return Err(Error::InvalidInput("no query carries a subset".into()));
    }
    let hits = present.iter().filter(|(r, t)| hit(r, t, k)).count();
    Ok(SubsetRecall {
        value: 100.0 * hits as f64 / present.len() as f64,
        counted: present.len(),
        excluded: rankings.len() - present.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    /// Honored only when the benchmark follows the exclusion convention.
    pub exclude_query_image: bool,
    pub index_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10, 50], subset_ks: vec![1, 2, 3], exclude_query_image: true, index_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub triplet: usize,
    pub ranking: Vec<String>,
    pub subset_ranking: Option<Vec<String>>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    /// "R@k" and "Rs@k" percentages.
    pub metrics: BTreeMap<String, f64>,
    pub queries: usize,
    pub subset_queries: usize,
    pub subset_excluded: usize,
    pub truncated_queries: usize,
    pub per_category: BTreeMap<String, BTreeMap<String, f64>>,
}

fn metric_key(name: &str) -> (u8, usize) {
    let (prefix, k) = name.split_once('@').unwrap_or((name, "0"));
    (u8::from(prefix != "R"), k.parse().unwrap_or(0))
}

impl RecallReport {
    /// Metric names in display order.
    pub fn metric_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.metrics.keys().map(String::as_str).collect();
        names.sort_by_key(|n| metric_key(n));
        names
    }

    /// Range and monotonicity checks.
    pub fn check(&self) -> Result<()> {
        for prefix in [0u8, 1] {
            let mut last = 0.0;
            for name in self.metric_names().into_iter().filter(|n| metric_key(n).0 == prefix) {
                let v = self.metrics[name];
                if !(0.0..=100.0).contains(&v) || v < last {
                    return Err(Error::ContractViolation(format!("{name} = {v} breaks recall invariants")));
                }
                last = v;
            }
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let names = self.metric_names();
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "split");
        for n in &names {
            let _ = write!(out, "{n:>8}");
        }
        out.push('\n');
        let mut row = |label: &str, m: &BTreeMap<String, f64>| {
            let _ = write!(out, "{label:<12}");
            for n in &names {
                match m.get(*n) {
                    Some(v) => {
                        let _ = write!(out, "{v:>8.2}");
                    }
                    None => {
                        let _ = write!(out, "{:>8}", "-");
                    }
                }
            }
            out.push('\n');
        };
        for (cat, m) in &self.per_category {
            row(cat, m);
        }
        row("all", &self.metrics);
        let _ = writeln!(out, "queries: {} (subset: {}, without subset: {})", self.queries, self.subset_queries, self.subset_excluded);
        out
    }
}

fn metrics_for(results: &[&QueryResult], targets: &[String], opts: &EvalOptions) -> Result<(BTreeMap<String, f64>, Option<SubsetRecall>)> {
    let rankings: Vec<Vec<String>> = results.iter().map(|r| r.ranking.clone()).collect();
    let mut m = BTreeMap::new();
    for &k in &opts.ks {
        m.insert(format!("R@{k}"), recall_at_k(&rankings, targets, k)?);
    }
    let subsets: Vec<Option<Vec<String>>> = results.iter().map(|r| r.subset_ranking.clone()).collect();
    let mut last = None;
    if subsets.iter().any(Option::is_some) {
        for &k in &opts.subset_ks {
            let s = recall_subset_at_k(&subsets, targets, k)?;
            m.insert(format!("Rs@{k}"), s.value);
            last = Some(s);
        }
    }
    Ok((m, last))
}

/// Ranks every triplet of `bench` against its gallery and scores the result.
pub fn evaluate<T: Scalar>(
    bench: &Benchmark,
    backbone: &dyn Backbone<T>,
    net: &InversionNetwork<T>,
    opts: &EvalOptions,
) -> Result<(RecallReport, Vec<QueryResult>)> {
    if bench.triplets.is_empty() {
        return Err(Error::InvalidInput(format!("benchmark {} has no triplets", bench.name)));
    }
    if opts.ks.is_empty() || opts.ks.contains(&0) || opts.subset_ks.contains(&0) {
        return Err(Error::Config("eval.ks must be a non-empty list of positive integers".into()));
    }
    let exclude = opts.exclude_query_image && bench.excludes_query_image;
    let depth = opts.ks.iter().copied().max().unwrap_or(1);
    let prep = backbone.preprocessing();
    let mut indexes: HashMap<Option<String>, GalleryIndex<T>> = HashMap::new();
    for g in &bench.galleries {
        let path = opts.index_dir.as_ref().map(|d| {
            let label = g.category.as_deref().unwrap_or("all");
            d.join(format!("{}-{}-{label}.index", bench.name, bench.split))
        });
        indexes.insert(g.category.clone(), load_or_build_index(g, backbone, path.as_deref())?);
    }
    let results = bench
        .triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let index = indexes.get(&t.category).ok_or_else(|| {
                Error::InvalidInput(format!("no gallery for category {:?}", t.category))
            })?;
            let (q, truncated) = embed_query(t, net, backbone, &prep)?;
            let scores = index.scores(q.view());
            let skip = exclude.then_some(t.query_id.as_str());
            Ok(QueryResult {
                triplet: i,
                ranking: rank_scores(&scores, &index.ids, depth, skip),
                subset_ranking: t.subset_ids.as_ref().map(|s| rank_subset(&scores, &index.ids, s, skip)),
                truncated,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let targets: Vec<String> = bench.triplets.iter().map(|t| t.target_id.clone()).collect();
    let all: Vec<&QueryResult> = results.iter().collect();
    let (metrics, subset) = metrics_for(&all, &targets, opts)?;
    let mut per_category = BTreeMap::new();
    let categories: Vec<&String> = bench.galleries.iter().filter_map(|g| g.category.as_ref()).collect();
    if categories.len() > 1 {
        for cat in categories {
            let idx: Vec<usize> = (0..results.len()).filter(|&i| bench.triplets[i].category.as_ref() == Some(cat)).collect();
            if idx.is_empty() {
                continue;
            }
            let rs: Vec<&QueryResult> = idx.iter().map(|&i| &results[i]).collect();
            let ts: Vec<String> = idx.iter().map(|&i| targets[i].clone()).collect();
            per_category.insert(cat.clone(), metrics_for(&rs, &ts, opts)?.0);
        }
    }
    let report = RecallReport {
        metrics,
        queries: results.len(),
        subset_queries: subset.map_or(0, |s| s.counted),
        subset_excluded: subset.map_or(results.len(), |s| s.excluded),
        truncated_queries: results.iter().filter(|r| r.truncated).count(),
        per_category,
    };
    report.check()?;
    Ok((report, results))
}

/// One recall report per τ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<(f64, RecallReport)>,
}

/// Trains and evaluates one model per τ through `run`.
pub fn run_tau_ablation(taus: &[f64], mut run: impl FnMut(f64) -> Result<RecallReport>) -> Result<AblationTable> {
    if taus.is_empty() {
        return Err(Error::Config("ablation.taus must not be empty".into()));
    }
    for &t in taus {
        crate::masking::check_tau(t)?;
    }
    let rows = taus.iter().map(|&t| run(t).map(|r| (t, r))).collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

impl AblationTable {
    fn columns(&self) -> Vec<String> {
        self.rows.first().map(|(_, r)| r.metric_names().into_iter().map(String::from).collect()).unwrap_or_default()
    }

    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let mut out = format!("{:<6}", "tau");
        for c in &cols {
            let _ = write!(out, "{c:>8}");
        }
        out.push('\n');
        for (tau, r) in &self.rows {
            let _ = write!(out, "{tau:<6.2}");
            for c in &cols {
                let _ = write!(out, "{:>8.2}", r.metrics.get(c).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = std::iter::once("tau".to_string()).chain(cols.iter().cloned()).collect::<Vec<_>>().join(",");
        out.push('\n');
        for (tau, r) in &self.rows {
            let mut cells = vec![tau.to_string()];
            cells.extend(cols.iter().map(|c| r.metrics.get(c).copied().unwrap_or(f64::NAN).to_string()));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{StubBackbone, StubConfig};
    use crate::data::triplets::fixture_benchmark;
    use crate::inversion::InversionConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i:03}")).collect()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let ids = s(&["c", "a", "b"]);
        assert_eq!(rank_scores(&[0.5, 0.5, 0.9], &ids, 3, None), s(&["b", "a", "c"]));
        assert_eq!(rank_scores(&[0.5, 0.5, 0.9], &ids, 10, Some("b")), s(&["a", "c"]));
    }

    #[test]
    fn exact_match_ranks_first() {
        let f = Array2::<f64>::eye(3);
        let index = GalleryIndex::new(ids(3), f.clone(), "x".into()).unwrap();
        assert_eq!(rank(f.row(1), &index, 1), vec!["g001".to_string()]);
    }

    #[test]
    fn recall_by_hand() {
        let r = vec![s(&["t", "x"]), s(&["x", "t"]), s(&["x", "y"]), s(&["y", "x"])];
        let t = s(&["t", "t", "t", "t"]);
        assert_eq!(recall_at_k(&r, &t, 1).unwrap(), 25.0);
        assert_eq!(recall_at_k(&r, &t, 2).unwrap(), 50.0);
        assert!(recall_at_k(&[], &[], 1).unwrap_err().to_string().contains("no queries"));
        let sub = vec![Some(s(&["t"])), None];
        let out = recall_subset_at_k(&sub, &s(&["t", "t"]), 1).unwrap();
        assert_eq!((out.value, out.counted, out.excluded), (100.0, 1, 1));
    }

    #[test]
    fn subset_recall_monte_carlo() {
        // random scores over six candidates: Rs@3 should be near 50%
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let gallery = ids(6);
        let mut rankings = Vec::new();
        for _ in 0..10_000 {
            let scores: Vec<f64> = (0..6).map(|_| rng.gen()).collect();
            rankings.push(Some(rank_subset(&scores, &gallery, &gallery, None)));
        }
        let targets = vec![gallery[0].clone(); rankings.len()];
        let r3 = recall_subset_at_k(&rankings, &targets, 3).unwrap().value;
        assert!((r3 - 50.0).abs() <= 2.0, "{r3}");
        assert_eq!(recall_subset_at_k(&rankings, &targets, 6).unwrap().value, 100.0);
    }

    #[test]
    fn index_roundtrip_and_staleness() {
        let b = StubBackbone::<f64>::new(StubConfig::default());
        let bench = fixture_benchmark(3, 1);
        let g = &bench.galleries[0];
        let index = build_index(g, &b).unwrap();
        assert_eq!(index.features.dim(), (g.ids.len(), 16));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.index");
        index.save(&p).unwrap();
        assert_eq!(GalleryIndex::<f64>::load(&p, &index.fingerprint).unwrap(), index);
        assert!(matches!(GalleryIndex::<f64>::load(&p, "other"), Err(Error::StaleIndex(_))));
        let empty = Gallery { category: None, ids: vec![], sources: vec![] };
        assert!(build_index(&empty, &b).is_err());
    }

    #[test]
    fn fixture_evaluation_is_consistent() {
        let b = StubBackbone::<f64>::new(StubConfig::default());
        let bench = fixture_benchmark(20, 3);
        let net = InversionNetwork::new(InversionConfig::new(16, 16, None, 0)).unwrap();
        let before = net.params.clone();
        let opts = EvalOptions { subset_ks: vec![1, 2, 3, 6], ..Default::default() };
        let (report, results) = evaluate(&bench, &b, &net, &opts).unwrap();
        assert_eq!(net.params, before);
        assert_eq!(report.queries, 20);
        assert_eq!(report.metrics["Rs@6"], 100.0);
        for (r, t) in results.iter().zip(&bench.triplets) {
            assert!(!r.ranking.contains(&t.query_id));
            assert_eq!(r.subset_ranking.as_ref().unwrap().len(), 6);
        }
        let (again, _) = evaluate(&bench, &b, &net, &opts).unwrap();
        assert_eq!(report, again);
        assert!(report.to_table().contains("R@50"));
    }

    #[test]
    fn embedding_is_deterministic() {
        let b = StubBackbone::<f64>::new(StubConfig::default());
        let bench = fixture_benchmark(2, 3);
        let net = InversionNetwork::new(InversionConfig::new(16, 16, None, 0)).unwrap();
        let prep = b.preprocessing();
        let (a, _) = embed_query(&bench.triplets[0], &net, &b, &prep).unwrap();
        let (c, dropped) = embed_query(&bench.triplets[0], &net, &b, &prep).unwrap();
        assert_eq!(a, c);
        assert!(!dropped);
        assert!((a.dot(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ablation_table_shapes() {
        let report = |tau: f64| RecallReport {
            metrics: [("R@1".to_string(), tau * 100.0), ("R@5".into(), 90.0)].into(),
            queries: 1,
            subset_queries: 0,
            subset_excluded: 1,
            truncated_queries: 0,
            per_category: BTreeMap::new(),
        };
        let table = run_tau_ablation(&[0.2, 0.3, 0.4], |t| Ok(report(t))).unwrap();
        assert_eq!(table.rows.len(), 3);
        let csv = table.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "tau,R@1,R@5");
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(run_tau_ablation(&[0.3], |t| Ok(report(t))).unwrap().to_text().lines().count(), 2);
        assert!(run_tau_ablation(&[1.5], |t| Ok(report(t))).is_err());
    }

    proptest! {
        #[test]
        fn rank_matches_brute_force(scores in prop::collection::vec(-1.0f64..1.0, 1..40), k in 1usize..50) {
            let gallery = ids(scores.len());
            let got = rank_scores(&scores, &gallery, k, None);
            let mut all: Vec<(f64, String)> = scores.iter().cloned().zip(gallery.iter().cloned()).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<String> = all.into_iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(&got, &want);
            if let Some(first) = got.first() {
                let argmax = (0..scores.len()).fold(0, |m, i| if scores[i] > scores[m] { i } else { m });
                prop_assert_eq!(first, &gallery[argmax]);
            }
        }

        #[test]
        fn recall_is_monotone(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gallery = ids(12);
            let mut rankings = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..10 {
                let scores: Vec<f64> = (0..12).map(|_| rng.gen()).collect();
                rankings.push(rank_scores(&scores, &gallery, 12, None));
                targets.push(gallery[rng.gen_range(0..12)].clone());
            }
            let mut last = 0.0;
            for k in 1..=12 {
                let r = recall_at_k(&rankings, &targets, k).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
            prop_assert_eq!(last, 100.0);
        }
    }
}
