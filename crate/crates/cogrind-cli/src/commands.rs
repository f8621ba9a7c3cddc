//! Subcommand bodies. Each wires library calls together, validates
//! flags, and writes a [`RunManifest`] next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, ensure, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use cogrind::config::Settings;
use cogrind::geom::Box2;
use cogrind::metrics::{frame_scores, EvalReport, FrameScore};
use cogrind::model::{FramePrediction, Grounder, Mode};
use cogrind::postproc::{stabilize_video, TopKFrame};
use cogrind::records::{
    group_by_video, read_predictions, write_history, write_predictions, FrameRecord, RunManifest,
};
use cogrind::synth::{self, AmbiguityClass, Dataset, ManifestEntry};
use cogrind::tensor::Real;
use cogrind::trainer::{self, TrainConfig};

fn load_settings(path: Option<&Path>) -> Result<Settings> {
    match path {
        Some(p) => Settings::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Settings::default()),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Manifest location for a file output: `preds.jsonl` gets
/// `preds.manifest.json` in the same directory.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn finish_manifest(
    subcommand: &str,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    start: Instant,
) -> RunManifest {
    let mut m = RunManifest::new(subcommand, seed);
    m.config = config;
    m.inputs = inputs;
    m.outputs = outputs;
    m.wall_clock_secs = start.elapsed().as_secs_f64();
    m
}

pub fn cmd_gen(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let start = Instant::now();
    let settings = load_settings(config)?;
    let data = synth::generate(&settings.gen_config(seed)).context("dataset generation failed")?;
    data.save(out).with_context(|| format!("writing dataset to {}", out.display()))?;
    let inputs = config.map(display).into_iter().collect();
    finish_manifest("gen", seed, settings.resolved_map(), inputs, vec![display(out)], start)
        .save(&out.join("run_manifest.json"))?;
    info!("wrote {} videos to {}", data.videos.len(), out.display());
    Ok(())
}

pub fn cmd_train(data_dir: &Path, config: Option<&Path>, mode: Option<Mode>, seed: u64, out: &Path) -> Result<()> {
    let start = Instant::now();
    let mut settings = load_settings(config)?;
    if let Some(m) = mode {
        settings.mode = m;
    }
    let data = Dataset::load(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    // The model input size is dictated by the data, not a free choice.
    if settings.canvas != data.config.canvas {
        info!("adopting dataset canvas {} as the model input size", data.config.canvas);
        settings.canvas = data.config.canvas;
    }
    let mut cfg = TrainConfig::from_settings(&settings, seed);
    cfg.model.vocab = data.vocab.len();

    let report = trainer::train(cfg, &data)?;
    fs::create_dir_all(out)?;
    report.grounder.save(&out.join("model.ckpt"), &out.join("model.json"))?;
    write_history(&out.join("history.csv"), &report.history)?;
    if let Some(epoch) = report.diverged_at {
        warn!("training diverged in epoch {epoch}; the checkpoint holds the last stable parameters");
    }
    let inputs = config.map(display).into_iter().chain([display(data_dir)]).collect();
    finish_manifest("train", seed, settings.resolved_map(), inputs, vec![display(out)], start)
        .save(&out.join("run_manifest.json"))?;
    if let Some(last) = report.history.last() {
        info!(
            "trained {} epochs on {} videos: val_acc {:.4}, val_miou {:.4}",
            report.history.len(),
            report.train_videos,
            last.val_acc,
            last.val_miou
        );
    }
    Ok(())
}

/// Attention maps for one frame, written as a JSON-lines sidecar when
/// `--dump-maps` is set.
#[derive(Serialize)]
struct MapDump<'a> {
    video_id: usize,
    frame_idx: usize,
    alpha_sub: &'a [Real],
    alpha_loc: &'a [Real],
    s: Option<&'a [Real]>,
    l: Option<&'a [Real]>,
}

pub fn cmd_infer(model_dir: &Path, data_dir: &Path, mode: Option<Mode>, topk: usize, dump_maps: bool, out: &Path) -> Result<()> {
    let start = Instant::now();
    ensure!(topk >= 1, "--topk must be at least 1");
    let mut grounder = Grounder::load(&model_dir.join("model.ckpt"), &model_dir.join("model.json"))
        .with_context(|| format!("loading model from {}", model_dir.display()))?;
    if let Some(m) = mode {
        let mut config = grounder.config.clone();
        config.mode = m;
        grounder = Grounder::from_parts(config, grounder.params)?;
    }
    let data = Dataset::load(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    ensure!(
        data.config.canvas == grounder.config.image_size,
        "dataset canvas {} does not match model input size {}",
        data.config.canvas,
        grounder.config.image_size
    );

    let predictions: Vec<(usize, Vec<FramePrediction>)> = data
        .videos
        .par_iter()
        .map(|v| {
            let preds = grounder
                .predict_video(&v.frames, &v.tokens, topk, dump_maps)
                .with_context(|| format!("inference failed on video {}", v.id))?;
            Ok((v.id, preds))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut maps = String::new();
    for (video_id, frames) in &predictions {
        for (frame_idx, pred) in frames.iter().enumerate() {
            records.push(FrameRecord::from_prediction(*video_id, frame_idx, pred));
            if dump_maps {
                let m = pred.maps.as_ref().expect("maps requested from predict_video");
                let dump = MapDump {
                    video_id: *video_id,
                    frame_idx,
                    alpha_sub: &m.alpha_sub,
                    alpha_loc: &m.alpha_loc,
                    s: m.s.as_deref(),
                    l: m.l.as_deref(),
                };
                maps.push_str(&serde_json::to_string(&dump)?);
                maps.push('\n');
            }
        }
    }
    write_predictions(out, &records)?;
    let mut outputs = vec![display(out)];
    if dump_maps {
        let maps_path = sibling(out, "maps.jsonl");
        fs::write(&maps_path, maps)?;
        outputs.push(display(&maps_path));
    }

    let mut cfg = BTreeMap::new();
    cfg.insert("mode".into(), grounder.config.mode.to_string());
    cfg.insert("topk".into(), topk.to_string());
    cfg.insert("dump_maps".into(), dump_maps.to_string());
    let inputs = vec![display(model_dir), display(data_dir)];
    finish_manifest("infer", 0, cfg, inputs, outputs, start).save(&sibling(out, "manifest.json"))?;
    info!("wrote {} frame predictions to {}", records.len(), out.display());
    Ok(())
}

pub fn cmd_stabilize(predictions: &Path, topk: usize, window: usize, out: &Path) -> Result<()> {
    let start = Instant::now();
    ensure!(topk >= 1, "--topk must be at least 1");
    ensure!(window % 2 == 1, "--window must be odd, got {window}");
    let records = read_predictions(predictions).with_context(|| format!("reading {}", predictions.display()))?;
    let videos = group_by_video(&records)?;

    let mut stabilized_records = Vec::new();
    for (video_id, frames) in &videos {
        let file_k = frames[0].boxes.len();
        ensure!(
            file_k >= topk,
            "video {video_id} carries {file_k} candidates per frame, stabilization with --topk {topk} needs at least that many"
        );
        let windows: Vec<TopKFrame> = frames
            .iter()
            .map(|r| {
                // Keep the top `topk` of the (score-sorted) candidates.
                let mut trimmed = r.clone();
                trimmed.boxes.truncate(topk);
                trimmed.features.truncate(topk);
                trimmed.selected_idx = trimmed.selected_idx.min(topk - 1);
                Ok(trimmed.topk_frame()?)
            })
            .collect::<Result<_>>()?;
        let restabilized = stabilize_video(&windows, window)
            .with_context(|| format!("stabilizing video {video_id}"))?;
        for (r, s) in frames.iter().zip(&restabilized) {
            let mut trimmed = r.clone();
            trimmed.boxes.truncate(topk);
            trimmed.features.truncate(topk);
            stabilized_records.push(trimmed.restabilized(s));
        }
    }
    write_predictions(out, &stabilized_records)?;

    let mut cfg = BTreeMap::new();
    cfg.insert("topk".into(), topk.to_string());
    cfg.insert("window".into(), window.to_string());
    finish_manifest("stabilize", 0, cfg, vec![display(predictions)], vec![display(out)], start)
        .save(&sibling(out, "manifest.json"))?;
    info!("stabilized {} videos into {}", videos.len(), out.display());
    Ok(())
}

enum Subset {
    All,
    Occluded,
    Class(AmbiguityClass),
}

fn parse_subset(s: &str) -> Result<Subset> {
    match s {
        "all" => Ok(Subset::All),
        "occluded" => Ok(Subset::Occluded),
        other => AmbiguityClass::ALL
            .into_iter()
            .find(|c| c.name() == other)
            .map(Subset::Class)
            .ok_or_else(|| {
                anyhow!(
                    "unknown subset {other:?}; expected all, occluded, or one of {}",
                    AmbiguityClass::ALL.map(|c| c.name()).join(", ")
                )
            }),
    }
}

impl Subset {
    /// Whether frame `t` of a video with the given annotations counts.
    fn keeps(&self, entry: &ManifestEntry, t: usize) -> bool {
        match self {
            Subset::All => true,
            Subset::Occluded => matches!(entry.occlusion, Some((a, b)) if (a..b).contains(&t)),
            Subset::Class(c) => entry.ambiguity_class == *c,
        }
    }
}

/// Score one prediction file against the manifest under a frame subset.
fn score_file(
    path: &Path,
    by_id: &BTreeMap<usize, &ManifestEntry>,
    canvas: Real,
    subset: &Subset,
) -> Result<EvalReport> {
    let records = read_predictions(path).with_context(|| format!("reading {}", path.display()))?;
    let videos = group_by_video(&records)?;
    let mut scored: Vec<(String, Vec<FrameScore>)> = Vec::new();
    for (video_id, frames) in &videos {
        let entry = by_id
            .get(video_id)
            .ok_or_else(|| anyhow!("video {video_id} is not in the dataset manifest"))?;
        ensure!(
            frames.len() == entry.gt_tube.len(),
            "video {video_id}: {} predicted frames but {} annotated frames",
            frames.len(),
            entry.gt_tube.len()
        );
        let mut preds: Vec<Box2> = Vec::new();
        let mut gts: Vec<Box2> = Vec::new();
        for (t, (rec, gt)) in frames.iter().zip(&entry.gt_tube).enumerate() {
            if !subset.keeps(entry, t) {
                continue;
            }
            let sel = rec.boxes[rec.selected_idx].center_box();
            preds.push(sel.to_pixels(canvas).clip(canvas, canvas));
            gts.push(*gt);
        }
        if preds.is_empty() {
            continue;
        }
        let fs = frame_scores(&preds, &gts).with_context(|| format!("scoring video {video_id}"))?;
        scored.push((format!("v{video_id:04}"), fs));
    }
    ensure!(!scored.is_empty(), "subset selected no frames in {}", path.display());
    Ok(EvalReport::from_scores(&scored))
}

fn label(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions").to_string()
}

pub fn cmd_eval(predictions: &[PathBuf], data_dir: &Path, subset: &str, out: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let subset_filter = parse_subset(subset)?;
    let (gen_cfg, entries) =
        synth::load_manifest(data_dir).with_context(|| format!("loading annotations from {}", data_dir.display()))?;
    let by_id: BTreeMap<usize, &ManifestEntry> = entries.iter().map(|e| (e.video_id, e)).collect();
    let canvas = gen_cfg.canvas as Real;

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for path in predictions {
        reports.push((label(path), score_file(path, &by_id, canvas, &subset_filter)?));
    }

    if reports.len() == 1 {
        println!("subset: {subset}");
        print!("{}", reports[0].1.text_table());
    } else {
        println!("subset: {subset}");
        println!("{:<24} {:>8} {:>8} {:>9} {:>9} {:>8}", "model", "frames", "acc@0.5", "mIoU", "success", "prec@20");
        for (name, r) in &reports {
            println!(
                "{:<24} {:>8} {:>8.4} {:>9.4} {:>9.4} {:>8.4}",
                name, r.n_frames, r.acc_at_05, r.miou, r.success_auc, r.precision_20
            );
        }
    }

    if let Some(out_path) = out {
        let json: BTreeMap<&str, serde_json::Value> = reports
            .iter()
            .map(|(name, r)| Ok((name.as_str(), serde_json::from_str(&r.to_json())?)))
            .collect::<Result<_>>()?;
        fs::write(out_path, serde_json::to_string_pretty(&json)?)?;
        let mut cfg = BTreeMap::new();
        cfg.insert("subset".into(), subset.to_string());
        let inputs = predictions.iter().map(|p| display(p)).chain([display(data_dir)]).collect();
        finish_manifest("eval", 0, cfg, inputs, vec![display(out_path)], start)
            .save(&sibling(out_path, "manifest.json"))?;
    }
    Ok(())
}
