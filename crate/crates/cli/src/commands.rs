use std::io::Read;
use std::path::{Path, PathBuf};

use cirmask::backbone::{Backbone, ImageBatch};
use cirmask::checkpoint::Checkpoint;
use cirmask::config::{run_dir_name, ResolvedConfig, Value};
use cirmask::data::cache::{cache_root, ingest, Fetch};
use cirmask::data::triplets::fixture_benchmark;
use cirmask::data::{load_pairs, load_triplets, Benchmark, BenchmarkFormat, EvalTriplet, ImageSource, PairDataset};
use cirmask::eval::{embed_query, evaluate, load_or_build_index, rank, run_tau_ablation, RecallReport};
use cirmask::inversion::InversionNetwork;
use cirmask::masking::{load_provider, load_tagger, mask_text, Masker, PosTagger, RelevanceProvider};
use cirmask::render::{emit_mask_preview, emit_result_grid, GridRow};
use cirmask::train::{train, TrainReport};
use cirmask::{Error, Result, Scalar};

use crate::args::{Cli, Command};

const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = ResolvedConfig::resolve(cli.config.as_deref(), overrides)?;
    match cfg.str("backbone.precision") {
        "f64" => dispatch::<f64>(cli.command, cfg),
        _ => dispatch::<f32>(cli.command, cfg),
    }
}

fn dispatch<T: Scalar>(command: Command, cfg: ResolvedConfig) -> Result<()> {
    match command {
        Command::Train => cmd_train::<T>(cfg),
        Command::Evaluate => cmd_evaluate::<T>(cfg),
        Command::Retrieve { image, text, top } => cmd_retrieve::<T>(cfg, &image, &text, top),
        Command::PreviewMask { count } => cmd_preview::<T>(cfg, count),
        Command::AblateTau => cmd_ablate::<T>(cfg),
        Command::Ingest => cmd_ingest(cfg),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

fn to_json<V: serde::Serialize>(v: &V) -> String {
    serde_json::to_string_pretty(v).expect("serializable report")
}

/// Loads the backbone, records the derived temperature and creates the run directory.
fn prepare<T: Scalar>(cfg: &mut ResolvedConfig) -> Result<(Box<dyn Backbone<T>>, PathBuf)> {
    let backbone = cfg.backbone_spec()?.load::<T>()?;
    if cfg.value("loss.temperature") == &Value::Auto {
        let t = 1.0 / backbone.logit_scale().to_f64_lossy();
        cfg.set_derived("loss.temperature", Value::Float(t));
    }
    let run_dir = match cfg.path("run.dir") {
        Some(d) => d,
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
            PathBuf::from(cfg.str("run.root")).join(run_dir_name(&stamp, &cfg.hash()))
        }
    };
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::Config(format!("cannot create run directory {}: {e}", run_dir.display())))?;
    cfg.write_echo(&run_dir, CODE_VERSION)?;
    log::info!("run directory {}", run_dir.display());
    Ok((backbone, run_dir))
}

fn masking_parts<T: Scalar>(cfg: &ResolvedConfig) -> Result<(Box<dyn PosTagger>, Box<dyn RelevanceProvider<T>>)> {
    let tagger = load_tagger(cfg.str("mask.pos_tagger"), cfg.path("mask.pos_tagger_path").as_deref())?;
    let provider = load_provider::<T>(
        cfg.str("mask.relevance_provider"),
        cfg.int("train.seed"),
        cfg.opt_usize("mask.grid").unwrap_or(4),
        cfg.path("mask.relevance_weights_path").as_deref(),
    )?;
    Ok((tagger, provider))
}

fn dataset(cfg: &ResolvedConfig) -> Result<PairDataset> {
    let manifest = cfg.str("data.manifest");
    if manifest.is_empty() {
        return Err(Error::Config("missing required key data.manifest".into()));
    }
    let data = load_pairs(Path::new(manifest), cfg.usize("data.limit"), cfg.path("data.cache_dir").as_deref())?;
    if !data.drops.is_empty() {
        log::warn!("dropped {} manifest lines: {:?}", data.drops.len(), data.drops.counts());
    }
    Ok(data)
}

fn benchmark(cfg: &ResolvedConfig) -> Result<Benchmark> {
    let format = BenchmarkFormat::parse(cfg.str("eval.benchmark"))?;
    if format == BenchmarkFormat::Fixture {
        return Ok(fixture_benchmark(cfg.usize("eval.fixture_size"), cfg.int("train.seed")));
    }
    let root = cfg.require_path("eval.root")?;
    load_triplets(&root, format, cfg.str("eval.split"), &cfg.str_list("eval.categories"))
}

fn train_once<T: Scalar>(
    cfg: &ResolvedConfig,
    backbone: &dyn Backbone<T>,
    data: &PairDataset,
    run_dir: &Path,
) -> Result<(TrainReport, InversionNetwork<T>)> {
    let (tagger, provider) = masking_parts::<T>(cfg)?;
    let tc = cfg.train_config(run_dir)?;
    let report = train(data, backbone, tagger.as_ref(), provider.as_ref(), &tc)?;
    let last = report.final_checkpoint.clone().expect("at least one epoch");
    let net = Checkpoint::<T>::load(&last)?.net;
    Ok((report, net))
}

fn summarize(report: &TrainReport) -> String {
    let mut out = String::from("epoch  steps  used  mean_total  skipped\n");
    for e in &report.epochs {
        out.push_str(&format!("{:>5}  {:>5}  {:>4}  {:>10.5}  {:?}\n", e.epoch, e.steps, e.samples_used, e.mean_total, e.skipped));
    }
    out.push_str(&format!("wall time {:.1}s, backbone checksum {}\n", report.wall_time_secs, report.checksum_after));
    out
}

fn cmd_train<T: Scalar>(mut cfg: ResolvedConfig) -> Result<()> {
    let data = dataset(&cfg)?;
    let (backbone, run_dir) = prepare::<T>(&mut cfg)?;
    let (report, _) = train_once(&cfg, backbone.as_ref(), &data, &run_dir)?;
    let text = summarize(&report);
    write(&run_dir.join("train_summary.txt"), &text)?;
    print!("{text}");
    println!("checkpoint {}", report.final_checkpoint.expect("at least one epoch").display());
    Ok(())
}

fn load_net<T: Scalar>(cfg: &ResolvedConfig, backbone: &dyn Backbone<T>) -> Result<InversionNetwork<T>> {
    let ck = Checkpoint::<T>::load(&cfg.require_path("eval.checkpoint")?)?;
    ck.check_backbone(backbone.name(), backbone.dims())?;
    Ok(ck.net)
}

fn grid_rows(bench: &Benchmark, results: &[cirmask::eval::QueryResult], count: usize) -> Vec<GridRow> {
    let source = |t: &EvalTriplet, id: &str| -> Option<ImageSource> {
        let g = bench.gallery_for(t.category.as_deref())?;
        g.ids.iter().position(|x| x == id).map(|i| g.sources[i].clone())
    };
    results
        .iter()
        .take(count)
        .map(|r| {
            let t = &bench.triplets[r.triplet];
            GridRow {
                query: t.query_image.clone(),
                query_text: t.query_text.clone(),
                target_id: t.target_id.clone(),
                retrieved: r.ranking.iter().map(|id| (id.clone(), source(t, id))).collect(),
            }
        })
        .collect()
}

fn evaluate_into<T: Scalar>(
    cfg: &ResolvedConfig,
    bench: &Benchmark,
    backbone: &dyn Backbone<T>,
    net: &InversionNetwork<T>,
    run_dir: &Path,
) -> Result<RecallReport> {
    let (report, results) = evaluate(bench, backbone, net, &cfg.eval_options(run_dir))?;
    write(&run_dir.join("report.json"), &to_json(&report))?;
    write(&run_dir.join("report.txt"), &report.to_table())?;
    let rows = grid_rows(bench, &results, cfg.usize("eval.grid_queries"));
    if !rows.is_empty() {
        emit_result_grid(&rows, cfg.usize("eval.grid_top"), &run_dir.join("results.png"))?;
    }
    Ok(report)
}

fn cmd_evaluate<T: Scalar>(mut cfg: ResolvedConfig) -> Result<()> {
    cfg.require_path("eval.checkpoint")?;
    let bench = benchmark(&cfg)?;
    let (backbone, run_dir) = prepare::<T>(&mut cfg)?;
    let net = load_net(&cfg, backbone.as_ref())?;
    let report = evaluate_into(&cfg, &bench, backbone.as_ref(), &net, &run_dir)?;
    print!("{}", report.to_table());
    println!("{}", to_json(&report));
    Ok(())
}

fn cmd_retrieve<T: Scalar>(mut cfg: ResolvedConfig, image: &Path, text: &str, top: usize) -> Result<()> {
    cfg.require_path("eval.checkpoint")?;
    let bench = benchmark(&cfg)?;
    let (backbone, run_dir) = prepare::<T>(&mut cfg)?;
    let net = load_net(&cfg, backbone.as_ref())?;
    let gallery = bench.galleries.first().ok_or_else(|| Error::InvalidInput("benchmark has no gallery".into()))?;
    let index = load_or_build_index(gallery, backbone.as_ref(), Some(&run_dir.join("retrieve.index")))?;
    let query = EvalTriplet {
        query_id: image.display().to_string(),
        query_image: ImageSource::File(image.to_path_buf()),
        query_text: text.to_string(),
        target_id: String::new(),
        subset_ids: None,
        category: gallery.category.clone(),
    };
    let (q, _) = embed_query(&query, &net, backbone.as_ref(), &backbone.preprocessing())?;
    let scores = index.scores(q.view());
    for id in rank(q.view(), &index, top) {
        let i = index.ids.iter().position(|x| *x == id).expect("ranked id");
        println!("{id}\t{:.5}", scores[i]);
    }
    Ok(())
}

fn cmd_preview<T: Scalar>(mut cfg: ResolvedConfig, count: usize) -> Result<()> {
    let mut data = dataset(&cfg)?;
    data.records.truncate(count.max(2));
    let (backbone, run_dir) = prepare::<T>(&mut cfg)?;
    let (tagger, provider) = masking_parts::<T>(&cfg)?;
    let masker = Masker::new(backbone.as_ref(), tagger.as_ref(), provider.as_ref(), cfg.float("mask.tau"))?;
    let prep = backbone.preprocessing();
    let images = data.records.iter().map(|r| r.source.load::<T>(&prep)).collect::<Result<Vec<_>>>()?;
    let captions: Vec<String> = data.records.iter().map(|r| r.caption.clone()).collect();
    let masked = masker.mask_batch(&ImageBatch::from_images(&images)?, &captions, cfg.int("train.seed"))?;
    for (i, reason) in &masked.skipped {
        println!("pair {i}: skipped ({})", reason.code());
    }
    for b in masked.bundles.iter().take(count) {
        let tokens = backbone.tokenize(&captions[b.index])?;
        let masked_caption = mask_text(&tokens, &b.removed)?.text();
        let out = run_dir.join(format!("preview-{:03}.png", b.index));
        emit_mask_preview(&images[b.index], b, &captions[b.index], &masked_caption, &prep, &out)?;
        println!("{}", out.display());
    }
    Ok(())
}

fn cmd_ablate<T: Scalar>(mut cfg: ResolvedConfig) -> Result<()> {
    let data = dataset(&cfg)?;
    let bench = benchmark(&cfg)?;
    let (backbone, run_dir) = prepare::<T>(&mut cfg)?;
    let table = run_tau_ablation(&cfg.float_list("ablation.taus"), |tau| {
        let mut c = cfg.clone();
        c.set_derived("mask.tau", Value::Float(tau));
        c.set_derived("train.checkpoint_dir", Value::Unset);
        c.validate()?;
        let dir = run_dir.join(format!("tau-{tau:.2}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", dir.display())))?;
        c.write_echo(&dir, CODE_VERSION)?;
        log::info!("tau {tau}: training");
        let (_, net) = train_once(&c, backbone.as_ref(), &data, &dir)?;
        evaluate_into(&c, &bench, backbone.as_ref(), &net, &dir)
    })?;
    write(&run_dir.join("ablation.txt"), &table.to_text())?;
    write(&run_dir.join("ablation.csv"), &table.to_csv())?;
    print!("{}", table.to_text());
    Ok(())
}

struct HttpFetch;

impl Fetch for HttpFetch {
    fn fetch(&self, url: &str) -> Result<Vec<u8>> {
        let fail = |m: String| Error::Fetch { url: url.to_string(), message: m };
        let resp = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
        let mut bytes = Vec::new();
        resp.into_body()
            .into_reader()
            .take(64 << 20)
            .read_to_end(&mut bytes)
            .map_err(|e| fail(e.to_string()))?;
        Ok(bytes)
    }
}

fn cmd_ingest(cfg: ResolvedConfig) -> Result<()> {
    let manifest = cfg.str("data.manifest");
    if manifest.is_empty() {
        return Err(Error::Config("missing required key data.manifest".into()));
    }
    let manifest = Path::new(manifest);
    let base = manifest.parent().unwrap_or(Path::new("."));
    let root = cache_root(cfg.path("data.cache_dir").as_deref(), base);
    let report = ingest(manifest, &root, &HttpFetch, cfg.usize("data.limit"))?;
    println!(
        "cache {}: fetched {}, already cached {}, local {}, failed {}",
        root.display(),
        report.fetched,
        report.already_cached,
        report.local,
        report.failed.len()
    );
    for (line, url, msg) in &report.failed {
        println!("  line {line}: {url}: {msg}");
    }
    Ok(())
}
