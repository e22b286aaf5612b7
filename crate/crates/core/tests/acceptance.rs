//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p cirmask --test acceptance`.

use std::path::PathBuf;
use std::time::Instant;

use cirmask::backbone::{Backbone, StubBackbone, StubConfig};
use cirmask::config::ResolvedConfig;
use cirmask::data::PairDataset;
use cirmask::eval::{rank_scores, rank_subset, recall_at_k, recall_subset_at_k};
use cirmask::inversion::{compose_query, InversionConfig, InversionNetwork};
use cirmask::masking::{mask_text, mix_images, split_masks, BinaryMasks, LexiconTagger, Masker, RelevanceMap, RemovedWord, StubRelevance};
use cirmask::objectives::{permute_rows, symmetric_info_nce};
use cirmask::backbone::FeatureBatch;
use cirmask::train::{loss_and_grad, train, TrainConfig};
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(limit_secs: Option<f64>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let detail = f()?;
    let secs = t.elapsed().as_secs_f64();
    if let Some(limit) = limit_secs {
        ensure(secs < limit, || format!("{detail}; took {secs:.2}s, limit {limit}s"))?;
    }
    Ok(format!("{detail} ({secs:.2}s)"))
}

const WORDS: &[&str] = &[
    "a", "the", "dog", "cat", "runs", "on", "grass", "red", "car", "near", "house", "two", "birds", "sit", "tree", "blue",
    "sky", "over", "lake", "small", "boat", "with", "white", "sail", "child", "holds", "kite", "beach",
];

fn splice_identity() -> Outcome {
    let b = StubBackbone::<f32>::new(StubConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let n = rng.gen_range(2..=9);
        let caption: Vec<&str> = (0..n).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        let caption = caption.join(" ");
        let tokens = b.tokenize(&caption).map_err(|e| e.to_string())?;
        let j = rng.gen_range(0..tokens.word_spans.len());
        let span = tokens.word_spans[j].clone();
        ensure(span.count == 1, || format!("word {:?} is not a single token", span.word))?;
        let removed = RemovedWord { word: span.word.clone(), word_index: j, token_position: span.start, token_count: 1 };
        let masked = mask_text(&tokens, &removed).map_err(|e| e.to_string())?;
        let pseudo = b.token_embedding(tokens.ids[span.start]).to_owned();
        let q = compose_query(&b, &masked, pseudo.view(), span.start).map_err(|e| e.to_string())?;
        let spliced = b.encode_embedded(&q.embedded, q.end_position()).map_err(|e| e.to_string())?;
        let plain = b.encode_text(&tokens).map_err(|e| e.to_string())?;
        let d = (&spliced.vectors - &plain.vectors).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        worst = worst.max(d);
    }
    ensure(worst <= 1e-5, || format!("max abs diff {worst:e} > 1e-5"))?;
    Ok(format!("50 captions, max abs diff {worst:e}"))
}

fn mask_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let taus: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for m in 0..1000 {
        let raw = Array2::from_shape_fn((7, 7), |_| rng.gen_range(-3.0..3.0f64));
        let map = RelevanceMap::from_raw(raw, "word").map_err(|e| e.to_string())?;
        let mut prev: Option<BinaryMasks> = None;
        for &tau in &taus {
            let masks = split_masks(&map, tau).map_err(|e| e.to_string())?;
            ensure((&masks.relevant + &masks.irrelevant).iter().all(|&v| v == 1), || format!("map {m}: masks not complementary at tau {tau}"))?;
            if let Some(p) = &prev {
                let grew = masks.relevant.iter().zip(p.relevant.iter()).any(|(&now, &before)| now > before);
                ensure(!grew, || format!("map {m}: relevant set grew at tau {tau}"))?;
            }
            prev = Some(masks);
        }
        let own = Array3::from_shape_fn((14, 14, 3), |_| rng.gen::<f64>());
        let partner = Array3::from_shape_fn((14, 14, 3), |_| rng.gen::<f64>());
        let all = BinaryMasks::from_relevant(Array2::ones((7, 7)));
        let none = BinaryMasks::from_relevant(Array2::zeros((7, 7)));
        let some = split_masks(&map, 0.5).map_err(|e| e.to_string())?;
        let mix = |a: &Array3<f64>, b: &Array3<f64>, k: &BinaryMasks| mix_images(a.view(), b.view(), k).map_err(|e| e.to_string());
        ensure(mix(&own, &partner, &all)? == own, || format!("map {m}: all-relevant mix is not own"))?;
        ensure(mix(&own, &partner, &none)? == partner, || format!("map {m}: none-relevant mix is not partner"))?;
        ensure(mix(&own, &own, &some)? == own, || format!("map {m}: self-mix changed the image"))?;
    }
    Ok("1000 maps, 11 thresholds".into())
}

fn unit_rows(rows: Vec<Array1<f64>>) -> FeatureBatch<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    FeatureBatch::normalize(ndarray::stack(ndarray::Axis(0), &views).unwrap())
}

fn loss_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2usize, 4, 8] {
        let v = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        let f = unit_rows(vec![v; n]);
        let (l, _, _) = symmetric_info_nce(&f, &f, 0.07).map_err(|e| e.to_string())?;
        let want = (n as f64).ln();
        ensure((l - want).abs() <= 1e-6, || format!("N={n}: {l} vs ln N = {want}"))?;
    }
    // by hand: logits [[1,0],[0,1]], each row's target has probability e/(e+1)
    let eye = FeatureBatch::normalize(Array2::<f64>::eye(2));
    let (l, _, _) = symmetric_info_nce(&eye, &eye, 1.0).map_err(|e| e.to_string())?;
    let e = std::f64::consts::E;
    let hand = -(e / (e + 1.0)).ln();
    ensure((l - hand).abs() <= 1e-4 && (l - 0.3133).abs() <= 1e-4, || format!("orthonormal N=2: {l} vs {hand}"))?;
    let a = unit_rows((0..6).map(|_| Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0))).collect());
    let b = unit_rows((0..6).map(|_| Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0))).collect());
    let (base, _, _) = symmetric_info_nce(&a, &b, 0.07).map_err(|e| e.to_string())?;
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);
    let (moved, _, _) = symmetric_info_nce(&permute_rows(&a, &perm), &permute_rows(&b, &perm), 0.07).map_err(|e| e.to_string())?;
    ensure((base - moved).abs() <= 1e-6, || format!("permutation changed loss by {}", (base - moved).abs()))?;
    Ok(format!("ln N for N in 2,4,8; orthonormal case {l:.6}; permutation diff {:.1e}", (base - moved).abs()))
}

fn gradient_check() -> Outcome {
    let b = StubBackbone::<f64>::new(StubConfig::default());
    let data = PairDataset::synthetic(4, 11);
    let prep = b.preprocessing();
    let images: Vec<_> = data.records.iter().map(|r| r.source.load::<f64>(&prep)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let batch = cirmask::backbone::ImageBatch::from_images(&images).map_err(|e| e.to_string())?;
    let captions: Vec<String> = data.records.iter().map(|r| r.caption.clone()).collect();
    let relevance = StubRelevance::new(0, 4).map_err(|e| e.to_string())?;
    let masker = Masker::new(&b, &LexiconTagger, &relevance, 0.3).map_err(|e| e.to_string())?;
    let bundles = masker.mask_batch(&batch, &captions, 5).map_err(|e| e.to_string())?.bundles;
    ensure(bundles.len() == 4, || format!("only {} of 4 samples masked", bundles.len()))?;
    let net = InversionNetwork::<f64>::new(InversionConfig::new(16, 16, None, 4)).map_err(|e| e.to_string())?;
    let t = 1.0 / StubBackbone::<f64>::LOGIT_SCALE;
    let eval = |n: &InversionNetwork<f64>| loss_and_grad(&b, n, &bundles, &batch, 0.5, t, &mut ChaCha8Rng::seed_from_u64(0));
    let (_, grads) = eval(&net).map_err(|e| e.to_string())?;
    let h = 1e-4;
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (ti, g) in grads.tensors.iter().enumerate() {
        for idx in 0..g.len() {
            let mut p = net.clone();
            p.params.tensors[ti].as_slice_mut().unwrap()[idx] += h;
            let mut m = net.clone();
            m.params.tensors[ti].as_slice_mut().unwrap()[idx] -= h;
            let num = (eval(&p).unwrap().0.total - eval(&m).unwrap().0.total) / (2.0 * h);
            let ana = g.as_slice().unwrap()[idx];
            let scale = num.abs().max(ana.abs());
            // relative error, with an absolute floor at the finite-difference noise level
            let err = (num - ana).abs() / scale.max(1e-6);
            ensure(err <= 1e-4, || format!("{}[{idx}]: analytic {ana:e}, numeric {num:e}", grads.names[ti]))?;
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok(format!("{count} parameters, worst relative error {worst:.2e}"))
}

struct ConvergenceRun {
    first_mean: f64,
    last_mean: f64,
    identical: bool,
    checksums_equal: bool,
}

fn convergence_run() -> Result<ConvergenceRun, String> {
    let b = StubBackbone::<f64>::new(StubConfig::default());
    let data = PairDataset::synthetic(256, 7);
    let relevance = StubRelevance::new(7, 4).map_err(|e| e.to_string())?;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for d in &dirs {
        let c = TrainConfig { batch_size: 32, epochs: 5, learning_rate: 1e-3, seed: 7, checkpoint_dir: d.path().into(), ..Default::default() };
        reports.push(train(&data, &b, &LexiconTagger, &relevance, &c).map_err(|e| e.to_string())?);
    }
    let read = |p: &Option<PathBuf>| std::fs::read(p.as_ref().unwrap()).unwrap();
    let r = &reports[0];
    Ok(ConvergenceRun {
        first_mean: r.epochs.first().unwrap().mean_total,
        last_mean: r.epochs.last().unwrap().mean_total,
        identical: read(&reports[0].final_checkpoint) == read(&reports[1].final_checkpoint),
        checksums_equal: reports.iter().all(|r| r.checksum_before == r.checksum_after),
    })
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = 40;
    let ids: Vec<String> = (0..g).map(|i| format!("img{i:03}")).collect();
    let (mut rankings, mut subset_rankings, mut targets, mut trials) = (vec![], vec![], vec![], vec![]);
    for _ in 0..100 {
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..g).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let t = rng.gen_range(0..g);
        let mut pool: Vec<usize> = (0..g).filter(|&i| i != t).collect();
        pool.shuffle(&mut rng);
        let mut subset: Vec<usize> = pool[..5].to_vec();
        subset.push(t);
        let subset_ids: Vec<String> = subset.iter().map(|&i| ids[i].clone()).collect();
        rankings.push(rank_scores(&scores, &ids, g, None));
        subset_rankings.push(Some(rank_subset(&scores, &ids, &subset_ids, None)));
        targets.push(ids[t].clone());
        trials.push((scores, t, subset));
    }
    // recount: position = number of candidates that beat the target
    let beats = |s: &[f64], a: usize, t: usize| s[a] > s[t] || (s[a] == s[t] && a < t);
    let mut last = 0.0;
    for k in 1..=g {
        let want = 100.0 * trials.iter().filter(|(s, t, _)| (0..g).filter(|&a| beats(s, a, *t)).count() < k).count() as f64 / 100.0;
        let got = recall_at_k(&rankings, &targets, k).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("R@{k}: {got} vs recount {want}"))?;
        ensure(got >= last, || format!("R@{k} decreased"))?;
        last = got;
    }
    for k in 1..=6 {
        let want = 100.0 * trials.iter().filter(|(s, t, sub)| sub.iter().filter(|&&a| beats(s, a, *t)).count() < k).count() as f64 / 100.0;
        let got = recall_subset_at_k(&subset_rankings, &targets, k).map_err(|e| e.to_string())?.value;
        ensure(got == want, || format!("Rs@{k}: {got} vs recount {want}"))?;
        if k == 6 {
            ensure(got == 100.0, || format!("Rs@6 = {got}"))?;
        }
    }
    Ok("100 triplets, R@1..40 and Rs@1..6 match recount, Rs@6 = 100".into())
}

fn config_fidelity() -> Outcome {
    let cfg = ResolvedConfig::resolve(None, &[]).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let path = cfg.write_echo(dir.path(), env!("CARGO_PKG_VERSION")).map_err(|e| e.to_string())?;
    let echo: toml::Table = std::fs::read_to_string(&path).unwrap().parse().map_err(|e: toml::de::Error| e.to_string())?;
    let get = |s: &str, k: &str| echo[s][k].clone();
    let checks = [
        ("train.batch_size", get("train", "batch_size"), toml::Value::Integer(128)),
        ("train.learning_rate", get("train", "learning_rate"), toml::Value::Float(1e-4)),
        ("train.epochs", get("train", "epochs"), toml::Value::Integer(10)),
        ("train.alpha", get("train", "alpha"), toml::Value::Float(0.5)),
        ("mask.tau", get("mask", "tau"), toml::Value::Float(0.3)),
        ("inversion.hidden", get("inversion", "hidden"), toml::Value::Integer(3072)),
    ];
    for (key, got, want) in checks {
        ensure(got == want, || format!("{key} echoed as {got}, expected {want}"))?;
    }
    Ok("echo file holds N=128, lr=1e-4, epochs=10, alpha=0.5, tau=0.3, hidden=3072".into())
}

/// Needs `CIRMASK_L14_WEIGHTS`, `CIRMASK_B32_WEIGHTS`, `CIRMASK_CIRR_ROOT` and
/// `CIRMASK_PAIRS` (a manifest of at least 50k pairs).
fn directional_sanity() -> Option<Outcome> {
    let var = |k: &str| std::env::var_os(k).map(PathBuf::from);
    let (Some(l14), Some(b32), Some(cirr), Some(pairs)) =
        (var("CIRMASK_L14_WEIGHTS"), var("CIRMASK_B32_WEIGHTS"), var("CIRMASK_CIRR_ROOT"), var("CIRMASK_PAIRS"))
    else {
        return None;
    };
    Some((|| {
        use cirmask::backbone::{BackboneSpec, ClipConfig};
        use cirmask::data::{load_pairs, load_triplets, BenchmarkFormat};
        use cirmask::eval::{evaluate, EvalOptions};
        use cirmask::masking::GradientAttentionRelevance;
        let e = |e: cirmask::Error| e.to_string();
        let backbone = BackboneSpec::Clip { config: ClipConfig::vit_l_14(), weights: l14 }.load::<f32>().map_err(e)?;
        let relevance = GradientAttentionRelevance::<f32>::load_b32(&b32).map_err(e)?;
        let data = load_pairs(&pairs, 250_000, None).map_err(e)?;
        ensure(data.len() >= 50_000, || format!("only {} usable pairs", data.len()))?;
        let bench = load_triplets(&cirr, BenchmarkFormat::Cirr, "val", &[]).map_err(e)?;
        let opts = EvalOptions::default();
        let dims = backbone.dims();
        let untrained = InversionNetwork::<f32>::new(InversionConfig::new(dims.image_dim, dims.token_dim, None, 0)).map_err(e)?;
        let (base, _) = evaluate(&bench, backbone.as_ref(), &untrained, &opts).map_err(e)?;
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig { epochs: 1, checkpoint_dir: dir.path().into(), ..Default::default() };
        let report = train(&data, backbone.as_ref(), &LexiconTagger, &relevance, &c).map_err(e)?;
        let net = cirmask::checkpoint::Checkpoint::<f32>::load(report.final_checkpoint.as_ref().unwrap()).map_err(e)?.net;
        let (trained, _) = evaluate(&bench, backbone.as_ref(), &net, &opts).map_err(e)?;
        let (b5, t5) = (base.metrics["R@5"], trained.metrics["R@5"]);
        ensure(t5 - b5 >= 5.0, || format!("R@5 {t5:.2} vs untrained {b5:.2}"))?;
        Ok(format!(
            "R@1 {:.2}, R@5 {t5:.2} (untrained {b5:.2}); reference values R@1 25.9, R@5 57.4",
            trained.metrics["R@1"]
        ))
    })())
}

fn main() {
    // single worker so the timing limits reflect one core
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    let mut failures = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
        Err(why) => {
            failures += 1;
            println!("criterion {n} FAIL  {name}: {why}");
        }
    };
    report(1, "splice identity", timed(Some(10.0), splice_identity));
    report(2, "mask algebra", timed(Some(5.0), mask_algebra));
    report(3, "loss numerics", timed(None, loss_numerics));
    report(4, "end-to-end gradient check", timed(None, gradient_check));
    let started = Instant::now();
    let run = convergence_run();
    let secs = started.elapsed().as_secs_f64();
    let (c5, c7) = match run {
        Ok(r) => {
            let c5 = if r.last_mean < r.first_mean && r.identical && secs < 120.0 {
                Ok(format!("mean total {:.5} -> {:.5}, checkpoints bitwise identical ({secs:.2}s for two runs)", r.first_mean, r.last_mean))
            } else {
                Err(format!(
                    "first {:.5}, last {:.5}, identical {}, {secs:.2}s for two runs",
                    r.first_mean, r.last_mean, r.identical
                ))
            };
            let c7 = if r.checksums_equal { Ok("backbone checksum unchanged".into()) } else { Err("backbone checksum changed".into()) };
            (c5, c7)
        }
        Err(e) => (Err(e.clone()), Err(e)),
    };
    report(5, "convergence smoke", c5);
    report(6, "metric oracle", timed(Some(5.0), metric_oracle));
    report(7, "frozen backbone", c7);
    report(8, "config fidelity", timed(None, config_fidelity));
    match directional_sanity() {
        Some(outcome) => report(9, "directional sanity", outcome),
        None => println!("criterion 9 SKIP  directional sanity: real weights or CIRR data not configured"),
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
