//! End-to-end entry points: corpus generation, training, evaluation,
//! attention export and ablation sweeps. Every entry point writes its
//! artifacts under the configured output directory together with a
//! `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::bbox::{encode_target, iou, BBox};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    categorize_false_positives, export_attention_map, mean_ap, write_category_csv, FpCategory, GtRecord,
    MetricsReport, SimilarityMap,
};
use crate::global_attention::GlobalMode;
use crate::head::{decode_detections, multitask_loss, write_detections, Detection, RoiTarget, TargetStats};
use crate::model::{calibrate_norm_scales, forward, pack_checkpoint, unpack_checkpoint, ModelConfig, Variant};
use crate::params::Params;
use crate::synth::{
    generate_image, image_seed, load_corpus, sample_minibatch, save_corpus, Sample, CLASS_NAMES,
};

const TEST_SALT: u64 = 0x7e57_5a17_0000_0001;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn generate_split(cfg: &RunConfig, seed: u64, count: usize) -> Result<Vec<Sample>> {
    let scene = &cfg.data.scene;
    let jobs = cfg.data.jobs.clamp(1, count.max(1));
    if jobs == 1 {
        return (0..count).map(|i| generate_image(image_seed(seed, i), scene)).collect();
    }
    // Each image has its own seed, so chunking across threads keeps the corpus identical.
    let chunk = count.div_ceil(jobs);
    let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                s.spawn(move || {
                    (j * chunk..((j + 1) * chunk).min(count))
                        .map(|i| generate_image(image_seed(seed, i), scene))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Loads the corpus named by `data.corpus`, or generates it from `data.seed`.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data.corpus {
        Some(root) => Ok(Corpus {
            train: load_corpus(&root.join("train"))?,
            test: load_corpus(&root.join("test"))?,
        }),
        None => Ok(Corpus {
            train: generate_split(cfg, cfg.data.seed, cfg.data.train_images)?,
            test: generate_split(cfg, cfg.data.seed ^ TEST_SALT, cfg.data.test_images)?,
        }),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    artifacts: Vec<String>,
    config: &'a RunConfig,
    results: serde_json::Value,
}

fn write_manifest(cfg: &RunConfig, command: &str, artifacts: &[PathBuf], results: serde_json::Value) -> Result<()> {
    let rel = |p: &PathBuf| {
        p.strip_prefix(&cfg.out)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let manifest = Manifest {
        command,
        artifacts: artifacts.iter().map(rel).collect(),
        config: cfg,
        results,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(cfg.out.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

fn write_config(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text())?;
    Ok(path)
}

/// Writes the corpus as `out/train` and `out/test`.
pub fn run_gen_data(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    let corpus = load_or_generate(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let train = cfg.out.join("train");
    let test = cfg.out.join("test");
    save_corpus(&corpus.train, &train)?;
    save_corpus(&corpus.test, &test)?;
    let conf = write_config(cfg)?;
    write_manifest(
        cfg,
        "gen-data",
        &[train, test, conf],
        serde_json::json!({"train_images": corpus.train.len(), "test_images": corpus.test.len()}),
    )?;
    Ok(corpus)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: Params<f32>,
    pub stats: TargetStats,
    pub log: Vec<LogEntry>,
    /// Wall-clock milliseconds at the end of each iteration.
    pub timing: Vec<f64>,
}

/// Training-set statistics of the foreground regression targets, rounded
/// to the checkpoint precision.
pub fn target_stats(samples: &[Sample], fg_iou: f64) -> TargetStats {
    let mut targets = Vec::new();
    for s in samples {
        for p in &s.proposals {
            let best = s
                .gts
                .iter()
                .map(|g| (iou(p, &g.bbox), g))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((o, g)) = best {
                if o > fg_iou {
                    targets.push(encode_target(p, &g.bbox));
                }
            }
        }
    }
    let s = TargetStats::from_targets(&targets);
    let round = |v: [f64; 4]| v.map(|x| x as f32 as f64);
    TargetStats {
        mean: round(s.mean),
        std: round(s.std),
    }
}

fn warmup_set(samples: &[Sample], total: usize) -> Vec<(crate::tensor::Tensor<f32>, Vec<BBox>)> {
    const PER_IMAGE: usize = 20;
    let mut left = total;
    let mut out = Vec::new();
    for s in samples {
        if left == 0 {
            break;
        }
        let take = PER_IMAGE.min(left).min(s.proposals.len());
        out.push((s.image.to_tensor(), s.proposals[..take].to_vec()));
        left -= take;
    }
    out
}

#[derive(Serialize)]
struct NanDump<'a> {
    iteration: usize,
    images: &'a [usize],
    flipped: &'a [bool],
    rois: Vec<Vec<[f64; 4]>>,
    targets: Vec<Vec<RoiTarget>>,
    loss: f64,
    loss_cls: f64,
    loss_reg: f64,
}

/// SGD with momentum on the joint loss. When `dump_dir` is given, a
/// non-finite loss or gradient writes `nan_dump.json` there before the
/// run aborts.
pub fn train(cfg: &RunConfig, corpus: &Corpus, dump_dir: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    let model = &cfg.model;
    let tc = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: Params<f32> = model.init_params(&mut rng);
    let amps = calibrate_norm_scales(&mut params, model, &warmup_set(&corpus.train, tc.warmup_proposals))?;
    info!("normalization scales calibrated to {amps:?}");
    let stats = if model.head.normalize_targets {
        target_stats(&corpus.train, tc.batch.fg_iou)
    } else {
        TargetStats::IDENTITY
    };

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let decays: Vec<bool> = names.iter().map(|n| n.ends_with(".w")).collect();
    let mut velocity: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(tc.iterations);
    let mut timing = Vec::with_capacity(tc.iterations);
    let start = Instant::now();
    let per_batch = tc.batch.images;

    for it in 0..tc.iterations {
        let lr = if it >= tc.decay_step { tc.lr * tc.lr_decay } else { tc.lr };
        let mut picked = Vec::with_capacity(per_batch);
        while picked.len() < per_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let flipped: Vec<bool> = picked.iter().map(|_| rng.random_bool(tc.flip_prob)).collect();
        let images: Vec<Sample> = picked
            .iter()
            .zip(&flipped)
            .map(|(&i, &f)| crate::synth::flip_augment(&corpus.train[i], f))
            .collect();
        let refs: Vec<&Sample> = images.iter().collect();
        let batch = sample_minibatch(&refs, &tc.batch, &mut rng)?;
        let total_rois: usize = batch.iter().map(|b| b.rois.len()).sum();

        let mut graph = Graph::<f32>::new();
        let mut total = None;
        let (mut j_cls, mut j_reg) = (0.0, 0.0);
        for (sample, rois) in images.iter().zip(&batch) {
            let out = forward(&mut graph, &params, model, sample.image.to_tensor(), &rois.rois)?;
            let targets: Vec<RoiTarget> = rois
                .targets
                .iter()
                .map(|t| RoiTarget {
                    label: t.label,
                    target: stats.normalize(&t.target),
                })
                .collect();
            let parts = multitask_loss(&mut graph, out.scores, out.deltas, &targets, model.head.reg_weight)?;
            let share = rois.rois.len() as f64 / total_rois as f64;
            j_cls += share * graph.values(parts.cls)[0] as f64;
            j_reg += share * graph.values(parts.reg)[0] as f64;
            let scaled = graph.scale(parts.total, share as f32)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => graph.add(acc, scaled)?,
            });
        }
        let total = total.expect("at least one image per batch");
        let loss = graph.values(total)[0] as f64;
        graph.backward(total)?;
        params.zero_grad();
        params.accumulate_grads(&graph)?;
        drop(graph);

        let grads_finite = params.iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
        if !loss.is_finite() || !grads_finite {
            let detail = format!("loss {loss} (cls {j_cls}, reg {j_reg}), finite gradients: {grads_finite}");
            if let Some(dir) = dump_dir {
                fs::create_dir_all(dir)?;
                let dump = NanDump {
                    iteration: it,
                    images: &picked,
                    flipped: &flipped,
                    rois: batch.iter().map(|b| b.rois.iter().map(BBox::corners).collect()).collect(),
                    targets: batch.iter().map(|b| b.targets.clone()).collect(),
                    loss,
                    loss_cls: j_cls,
                    loss_reg: j_reg,
                };
                fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
            }
            return Err(Error::NonFinite { iteration: it, detail });
        }

        let lr32 = lr as f32;
        let mom = tc.momentum as f32;
        let wd = tc.weight_decay as f32;
        for ((((_, t), v), &decay), _) in params.iter_mut().zip(&mut velocity).zip(&decays).zip(&names) {
            let Some(g) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let w = t.values_mut();
            for i in 0..w.len() {
                let step = if decay { g[i] + wd * w[i] } else { g[i] };
                v[i] = mom * v[i] + lr32 * step;
                w[i] -= v[i];
            }
        }

        log.push(LogEntry {
            iteration: it,
            loss,
            loss_cls: j_cls,
            loss_reg: j_reg,
            lr,
        });
        timing.push(start.elapsed().as_secs_f64() * 1e3);
        if it % 100 == 0 || it + 1 == tc.iterations {
            info!("iter {it:5}  loss {loss:.4}  cls {j_cls:.4}  reg {j_reg:.4}  lr {lr}");
        }
    }
    Ok(Trained {
        params,
        stats,
        log,
        timing,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Trains and writes checkpoint, log, timing, resolved config and manifest.
pub fn run_train(cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let corpus = load_or_generate(cfg)?;
    let trained = train(cfg, &corpus, Some(&cfg.out))?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    checkpoint::save(&pack_checkpoint(&trained.params, &trained.stats), &ckpt)?;
    let log_path = cfg.out.join(LOG_FILE);
    write_jsonl(&log_path, &trained.log)?;
    let timing_path = cfg.out.join(TIMING_FILE);
    let timing: Vec<serde_json::Value> = trained
        .timing
        .iter()
        .enumerate()
        .map(|(i, ms)| serde_json::json!({"iteration": i, "elapsed_ms": ms}))
        .collect();
    write_jsonl(&timing_path, &timing)?;
    let conf = write_config(cfg)?;
    let last = trained.log.last().cloned();
    write_manifest(
        cfg,
        "train",
        &[ckpt, log_path, timing_path, conf],
        serde_json::json!({"final": last}),
    )?;
    Ok(trained)
}

/// Class probabilities of `[R × C]` raw scores.
pub fn softmax_rows(scores: &[f32], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.chunks(cols) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Detections of one image.
pub fn detect(
    params: &Params<f32>,
    stats: &TargetStats,
    model: &ModelConfig,
    sample: &Sample,
    image_id: usize,
) -> Result<Vec<Detection>> {
    let mut graph = Graph::<f32>::new();
    let out = forward(&mut graph, params, model, sample.image.to_tensor(), &sample.proposals)?;
    let probs = softmax_rows(graph.values(out.scores), model.head.classes + 1);
    let deltas: Vec<f64> = graph.values(out.deltas).iter().map(|&v| v as f64).collect();
    decode_detections(
        image_id,
        &sample.proposals,
        &probs,
        &deltas,
        stats,
        (sample.image.width, sample.image.height),
        &model.head,
    )
}

pub fn gt_records(samples: &[Sample]) -> Vec<GtRecord> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.gts.iter().map(move |g| GtRecord {
                image_id: i,
                class_id: g.class_id,
                bbox: g.bbox.corners(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub detections: Vec<Detection>,
    pub gts: Vec<GtRecord>,
    pub report: MetricsReport,
    pub categories: BTreeMap<String, BTreeMap<FpCategory, usize>>,
}

pub fn evaluate(
    params: &Params<f32>,
    stats: &TargetStats,
    cfg: &RunConfig,
    samples: &[Sample],
) -> Result<Evaluation> {
    let mut detections = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        detections.extend(detect(params, stats, &cfg.model, s, i)?);
    }
    let gts = gt_records(samples);
    let report = mean_ap(&detections, &gts, &CLASS_NAMES, cfg.eval.iou, cfg.eval.ap_mode);
    let categories = categorize_false_positives(&detections, &gts, &CLASS_NAMES, &SimilarityMap::shapes());
    Ok(Evaluation {
        detections,
        gts,
        report,
        categories,
    })
}

/// Loads a checkpoint and checks it against the configured model.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Params<f32>, TargetStats)> {
    unpack_checkpoint(checkpoint::load(path)?, &cfg.model)
}

/// Evaluates a checkpoint on the held-out split (or the training split
/// when `on_train`) and writes report, detections, ground truth and
/// category counts.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, on_train: bool) -> Result<Evaluation> {
    cfg.validate()?;
    let (params, stats) = load_model(cfg, checkpoint)?;
    let corpus = load_or_generate(cfg)?;
    let samples = if on_train { &corpus.train } else { &corpus.test };
    let ev = evaluate(&params, &stats, cfg, samples)?;
    fs::create_dir_all(&cfg.out)?;
    let report = cfg.out.join("report.json");
    fs::write(&report, serde_json::to_string_pretty(&ev.report)? + "\n")?;
    let dets = cfg.out.join("detections.jsonl");
    write_detections(BufWriter::new(fs::File::create(&dets)?), &ev.detections)?;
    let gts = cfg.out.join("gt.jsonl");
    write_jsonl(&gts, &ev.gts)?;
    let cats = cfg.out.join("categories.csv");
    write_category_csv(BufWriter::new(fs::File::create(&cats)?), &ev.categories)?;
    let conf = write_config(cfg)?;
    write_manifest(
        cfg,
        "eval",
        &[report, dets, gts, cats, conf],
        serde_json::json!({"map": ev.report.map, "split": if on_train { "train" } else { "test" }}),
    )?;
    Ok(ev)
}

/// Attention maps `l_1 … l_{T+1}` of one image.
pub fn attention_maps(params: &Params<f32>, model: &ModelConfig, sample: &Sample) -> Result<Vec<Vec<f64>>> {
    let mut graph = Graph::<f32>::new();
    let whole = BBox::from_corners([0.0, 0.0, sample.image.width as f64, sample.image.height as f64])?;
    let out = forward(&mut graph, params, model, sample.image.to_tensor(), &[whole])?;
    Ok(out
        .maps
        .iter()
        .map(|m| graph.values(*m).iter().map(|&v| v as f64).collect())
        .collect())
}

/// Exports every step's attention map for the first `eval.attend_images`
/// held-out images as `imgNNNNNN_tS.csv` / `.pgm`.
pub fn run_attend(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let attention = matches!(cfg.model.variant, Variant::Full | Variant::MinusL)
        && cfg.model.global.mode == GlobalMode::Attention;
    if !attention {
        return Err(Error::Config(format!(
            "variant {} has no attention maps to export",
            cfg.model.variant
        )));
    }
    let (params, _) = load_model(cfg, checkpoint)?;
    let corpus = load_or_generate(cfg)?;
    let dir = cfg.out.join("attention");
    fs::create_dir_all(&dir)?;
    let k = cfg.model.global.grid;
    let mut files = Vec::new();
    for (i, s) in corpus.test.iter().take(cfg.eval.attend_images).enumerate() {
        let maps = attention_maps(&params, &cfg.model, s)?;
        for (t, m) in maps.iter().enumerate() {
            let stem = dir.join(format!("img{i:06}_t{}", t + 1));
            files.extend(export_attention_map(m, k, &stem, cfg.eval.map_cell)?);
        }
        if cfg.eval.export_mean_map {
            let n = maps.len() as f64;
            let mean: Vec<f64> = (0..k * k).map(|j| maps.iter().map(|m| m[j]).sum::<f64>() / n).collect();
            files.extend(export_attention_map(&mean, k, &dir.join(format!("img{i:06}_mean")), cfg.eval.map_cell)?);
        }
    }
    let conf = write_config(cfg)?;
    let mut artifacts = files.clone();
    artifacts.push(conf);
    write_manifest(cfg, "attend", &artifacts, serde_json::json!({"files": files.len()}))?;
    Ok(files)
}

/// One trained-and-evaluated configuration of an ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub scales: Vec<f64>,
    pub seed: u64,
    pub map: f64,
}

fn scales_label(s: &[f64]) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")
}

/// Trains and evaluates every requested variant (at the configured
/// scales) and every full-model scale set, on each seed, over one shared
/// corpus. Writes `ablation.csv` and `ablation_summary.csv`.
pub fn run_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let corpus = load_or_generate(cfg)?;
    let mut jobs: Vec<(Variant, Vec<f64>)> = cfg
        .ablate
        .variants
        .iter()
        .map(|&v| (v, cfg.model.local.scales.clone()))
        .collect();
    for s in &cfg.ablate.scale_sets {
        if !jobs.iter().any(|(v, sc)| *v == Variant::Full && sc == s) {
            jobs.push((Variant::Full, s.clone()));
        }
    }
    let mut rows = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for (variant, scales) in &jobs {
            let mut run = cfg.clone();
            run.seed = seed;
            run.model.variant = *variant;
            run.model.local.scales = scales.clone();
            info!("ablation: {variant} scales {} seed {seed}", scales_label(scales));
            let trained = train(&run, &corpus, Some(&cfg.out))?;
            let ev = evaluate(&trained.params, &trained.stats, &run, &corpus.test)?;
            rows.push(AblationRow {
                variant: *variant,
                scales: scales.clone(),
                seed,
                map: ev.report.map,
            });
        }
    }
    let table = cfg.out.join("ablation.csv");
    let mut text = String::from("variant,scales,seed,mAP\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{:.6}\n", r.variant, scales_label(&r.scales), r.seed, r.map));
    }
    fs::write(&table, text)?;
    let summary_path = cfg.out.join("ablation_summary.csv");
    let summary = summarize(&rows);
    let mut text = String::from("variant,scales,seeds,mean_mAP\n");
    for (variant, scales, n, mean) in &summary {
        text.push_str(&format!("{variant},{scales},{n},{mean:.6}\n"));
    }
    fs::write(&summary_path, text)?;
    let conf = write_config(cfg)?;
    write_manifest(
        cfg,
        "ablate",
        &[table, summary_path, conf],
        serde_json::to_value(&rows)?,
    )?;
    Ok(rows)
}

/// Mean mAP per (variant, scale set), in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(String, String, usize, f64)> {
    let mut out: Vec<(String, String, usize, f64)> = Vec::new();
    for r in rows {
        let key = (r.variant.to_string(), scales_label(&r.scales));
        match out.iter_mut().find(|e| e.0 == key.0 && e.1 == key.1) {
            Some(e) => {
                e.2 += 1;
                e.3 += r.map;
            }
            None => out.push((key.0, key.1, 1, r.map)),
        }
    }
    for e in &mut out {
        e.3 /= e.2 as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            out: out.to_path_buf(),
            ..RunConfig::default()
        };
        let text = "
            data.train_images = 4
            data.test_images = 2
            data.width = 64
            data.height = 64
            data.max_size = 32
            data.max_objects = 2
            data.proposals = 64
            backbone.widths = 4,8,8
            local.pool_size = 3
            local.fc_dims = 16,16
            global.grid = 2
            global.steps = 2
            global.layers = 2
            global.fc_dims = 8,8
            train.iterations = 3
            train.rois_per_batch = 32
            train.lr = 0.01
            eval.attend_images = 2
        ";
        cfg.apply_text(text, Path::new("tiny")).unwrap();
        cfg
    }

    #[test]
    fn train_eval_attend_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let trained = run_train(&cfg).unwrap();
        assert_eq!(trained.log.len(), 3);
        assert!(dir.path().join(MANIFEST_FILE).exists());
        let ckpt = dir.path().join(CHECKPOINT_FILE);
        let ev = run_eval(&cfg, &ckpt, false).unwrap();
        assert!((0.0..=1.0).contains(&ev.report.map));
        let files = run_attend(&cfg, &ckpt).unwrap();
        assert_eq!(files.len(), 2 * 3 * 2);
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let mut cfg = tiny_config(Path::new("unused"));
        cfg.data.train_images = 7;
        let serial = load_or_generate(&cfg).unwrap();
        cfg.data.jobs = 3;
        assert_eq!(load_or_generate(&cfg).unwrap(), serial);
    }

    #[test]
    fn attend_refuses_average_mode() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.model.variant = Variant::AvgGlobal;
        run_train(&cfg).unwrap();
        let err = run_attend(&cfg, &dir.path().join(CHECKPOINT_FILE)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn minus_g_checkpoint_rejected_by_full_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.model.variant = Variant::MinusG;
        run_train(&cfg).unwrap();
        cfg.model.variant = Variant::Full;
        let err = run_eval(&cfg, &dir.path().join(CHECKPOINT_FILE), false).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }
}
