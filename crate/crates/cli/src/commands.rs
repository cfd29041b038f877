use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use timedet::checkpoint::{load_checkpoint, Checkpoint};
use timedet::config::{grid_cells, parse_grid, ExperimentConfig, DEFAULT_GRID};
use timedet::dataset::{Dataset, Split};
use timedet::eval::{
    evaluate_detections, noise_probe, predict_all, write_predictions, EvalConfig, EvalReport, NoiseTarget, PostProcess,
    ProbeCache, ProbeResult,
};
use timedet::synth;
use timedet::train::{EpochRecord, Trainer};
use timedet::{Detector, Error};

use crate::plot;
use crate::ConfigArgs;

pub fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(Error::Config(format!("--split must be `train` or `val`, got `{s}`")).into()),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())).into())
}

/// Channel count shared by every video of the dataset.
fn dataset_channels(ds: &Dataset) -> Result<usize> {
    let first = ds
        .videos
        .first()
        .ok_or_else(|| Error::Data("dataset has no videos".into()))?
        .meta()
        .channels;
    if let Some(v) = ds.videos.iter().find(|v| v.meta().channels != first) {
        return Err(Error::Data(format!("video `{}` has {} channels, expected {first}", v.id(), v.meta().channels)).into());
    }
    Ok(first)
}

/// Points the model config at the dataset's feature width and label set.
fn fit_model_to_data(cfg: &mut ExperimentConfig, ds: &Dataset) -> Result<()> {
    cfg.model.channels = dataset_channels(ds)?;
    cfg.model.num_classes = ds.labels.len().max(1);
    Ok(())
}

fn load_detector(path: &Path, ds: &Dataset) -> Result<Detector<f32>> {
    let ck: Checkpoint<f32> = load_checkpoint(path)?;
    let channels = dataset_channels(ds)?;
    if ck.model.channels != channels {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} feature channels, dataset has {channels}",
            ck.model.channels
        ))
        .into());
    }
    if ck.model.num_classes < ds.labels.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint predicts {} classes, dataset defines {}",
            ck.model.num_classes,
            ds.labels.len()
        ))
        .into());
    }
    Ok(Detector::from_checkpoint(&ck)?)
}

/// Config text stored next to a run. The run directory itself is left out
/// so that identical runs in different places write identical files.
fn run_echo(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.train.checkpoint_dir = None;
    c.to_text()
}

const DATASET_ENTRIES: [&str; 5] = ["manifest.json", "annotations.json", "labels.json", "config.txt", "features"];

pub fn generate_data(args: &ConfigArgs, out: &Path, seed: Option<u64>, force: bool, checksums: bool) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.data.validate()?;
    let non_empty = out.is_dir() && fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::Config(format!("output directory {} is not empty; pass --force to replace it", out.display())).into());
        }
        // only remove what a dataset consists of
        for name in DATASET_ENTRIES {
            let p = out.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    let ds = synth::generate(&cfg.data)?;
    ds.save(out, checksums)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;

    let mut durations: Vec<f64> = ds.videos.iter().map(|v| v.meta().duration_sec).collect();
    durations.sort_by(f64::total_cmp);
    let q = |f: f64| durations[((durations.len() - 1) as f64 * f).round() as usize];
    let instances: usize = ds.videos.iter().map(|v| v.instances.len()).sum();
    println!(
        "wrote {} videos ({} train, {} val) to {}",
        ds.videos.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Val).len(),
        out.display()
    );
    println!(
        "duration s: min {:.1} q25 {:.1} median {:.1} q75 {:.1} max {:.1} (ratio {:.1})",
        q(0.0),
        q(0.25),
        q(0.5),
        q(0.75),
        q(1.0),
        q(1.0) / q(0.0)
    );
    println!(
        "instances: {instances} total, {:.2} per video",
        instances as f64 / ds.videos.len() as f64
    );
    Ok(())
}

pub fn train(data: &Path, args: &ConfigArgs, out: &Path, epochs: Option<usize>, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    cfg.train.checkpoint_dir = Some(out.to_path_buf());
    cfg.train.validate()?;
    let ds = Dataset::load(data)?;
    fit_model_to_data(&mut cfg, &ds)?;
    cfg.model.validate()?;
    create_dir(out)?;
    fs::write(out.join("config.txt"), run_echo(&cfg))?;

    let mut trainer = match resume {
        Some(p) => {
            let ck: Checkpoint<f32> = load_checkpoint(p)?;
            if ck.model != cfg.model {
                return Err(Error::Checkpoint(format!("{} was trained with a different model config", p.display())).into());
            }
            Trainer::resume(ck, cfg.train.clone())?
        }
        None => Trainer::new(Detector::<f32>::new(cfg.model.clone())?, cfg.train.clone())?,
    };
    trainer.run(&ds)?;
    let last = trainer.history().last().expect("at least one epoch");
    println!(
        "trained {} epochs: final loss {:.4}, IS {}",
        last.epoch,
        last.loss,
        last.instability.map_or("-".into(), |v| format!("{v:.4}"))
    );
    if let Some(m) = &last.eval {
        println!("val mAP@AVG {:.4}", m.average);
    }
    println!("checkpoint {}", out.join(format!("epoch_{}.ckpt", last.epoch)).display());
    Ok(())
}

#[derive(Serialize)]
struct NmsDelta {
    without_nms: f64,
    with_nms: f64,
    nms_threshold: f64,
    delta: f64,
}

fn write_report(out: &Path, stem: &str, report: &EvalReport, preds: &[timedet::timeline::DetectionSet]) -> Result<()> {
    write_json(&out.join(format!("{stem}.json")), report)?;
    fs::write(out.join(format!("{stem}.txt")), report.summary())?;
    let pred_name = stem.replacen("results", "predictions", 1);
    write_predictions(&out.join(format!("{pred_name}.json")), preds)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    data: &Path,
    checkpoint: &Path,
    args: &ConfigArgs,
    out: &Path,
    nms: Option<f64>,
    fixed_topk: Option<usize>,
    iou: Option<&str>,
    split: &str,
) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(list) = iou {
        cfg.set("eval.iou", list)?;
    }
    if nms.is_some() {
        cfg.nms = nms;
    }
    if fixed_topk == Some(0) {
        return Err(Error::Config("--fixed-topk must be at least 1".into()).into());
    }
    cfg.train.eval.validate()?;
    cfg.validate()?;
    let split = parse_split(split)?;
    let ds = Dataset::load(data)?;
    let det = load_detector(checkpoint, &ds)?;
    let videos = ds.split(split);
    if videos.is_empty() {
        return Err(Error::Data(format!("dataset has no {} videos", split.as_str())).into());
    }
    let gts = ds.ground_truth(split);
    let raw = predict_all(&det, &videos)?;
    create_dir(out)?;
    let plain = PostProcess { nms: None, top_k: fixed_topk };
    let (preds, report) = evaluate_detections(&raw, &gts, &cfg.train.eval, plain)?;
    write_report(out, "results", &report, &preds)?;
    print!("{}", report.summary());
    if let Some(t) = cfg.nms {
        let (preds_nms, with) = evaluate_detections(&raw, &gts, &cfg.train.eval, PostProcess { nms: Some(t), ..plain })?;
        write_report(out, "results_nms", &with, &preds_nms)?;
        let delta = NmsDelta {
            without_nms: report.map.average,
            with_nms: with.map.average,
            nms_threshold: t,
            delta: with.map.average - report.map.average,
        };
        write_json(&out.join("nms_delta.json"), &delta)?;
        println!(
            "with NMS {t}: mAP@AVG {:.4} (delta {:+.4})",
            with.map.average, delta.delta
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    cell: BTreeMap<String, String>,
    run: usize,
    map_avg: f64,
    per_threshold: Vec<f64>,
    thresholds: Vec<f64>,
    final_instability: Option<f64>,
    instability: Vec<f64>,
}

/// Training-relevant part of a config: evaluation settings removed.
fn training_signature(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.nms = None;
    c.train.eval = EvalConfig::default();
    c.train.checkpoint_dir = None;
    c.to_text()
}

pub fn ablate(data: &Path, grid: Option<&Path>, args: &ConfigArgs, out: &Path, epochs: Option<usize>) -> Result<()> {
    let mut base = load_config(args)?;
    if let Some(e) = epochs {
        base.train.epochs = e;
    }
    let grid_text = match grid {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Data(format!("cannot read grid {}: {e}", p.display())))?,
        None => DEFAULT_GRID.to_string(),
    };
    let axes = parse_grid(&grid_text)?;
    let cells = grid_cells(&axes);
    let ds = Dataset::load(data)?;
    fit_model_to_data(&mut base, &ds)?;
    let videos = ds.split(Split::Val);
    if videos.is_empty() {
        return Err(Error::Data("dataset has no val videos".into()).into());
    }
    let gts = ds.ground_truth(Split::Val);

    // validate every cell before spending time on training
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut cfg = base.clone();
        for (k, v) in cell {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        configs.push(cfg);
    }
    create_dir(out)?;
    let mut runs: Vec<(String, Vec<EpochRecord>, Vec<timedet::timeline::DetectionSet>)> = Vec::new();
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, mut cfg) in cells.iter().zip(configs) {
        let sig = training_signature(&cfg);
        let run = match runs.iter().position(|r| r.0 == sig) {
            Some(i) => i,
            None => {
                let dir = out.join(format!("run_{}", runs.len()));
                create_dir(&dir)?;
                cfg.train.checkpoint_dir = Some(dir.clone());
                fs::write(dir.join("config.txt"), run_echo(&cfg))?;
                log::info!("training run {} for {:?}", runs.len(), cell);
                let mut trainer = Trainer::new(Detector::<f32>::new(cfg.model.clone())?, cfg.train.clone())?;
                trainer.run(&ds)?;
                let raw = predict_all(&trainer.det, &videos)?;
                runs.push((sig, trainer.state.history.clone(), raw));
                runs.len() - 1
            }
        };
        let (_, history, raw) = &runs[run];
        let (_, report) = evaluate_detections(raw, &gts, &cfg.train.eval, PostProcess { nms: cfg.nms, top_k: None })?;
        let instability: Vec<f64> = history.iter().filter_map(|r| r.instability).collect();
        rows.push(AblationRow {
            cell: cell.iter().cloned().collect(),
            run,
            map_avg: report.map.average,
            per_threshold: report.map.per_threshold.clone(),
            thresholds: report.map.thresholds.clone(),
            final_instability: instability.last().copied(),
            instability,
        });
    }
    write_json(&out.join("ablation.json"), &rows)?;

    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    let mut table = String::new();
    for k in &keys {
        table.push_str(&format!("{k:>18} "));
    }
    table.push_str(&format!("{:>10} {:>10}\n", "mAP@AVG", "final IS"));
    for row in &rows {
        for k in &keys {
            table.push_str(&format!("{:>18} ", row.cell[*k]));
        }
        let is = row.final_instability.map_or("-".into(), |v| format!("{v:.4}"));
        table.push_str(&format!("{:>10.4} {is:>10}\n", row.map_avg));
    }
    fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");

    let curves: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .enumerate()
        .map(|(i, (_, history, _))| (format!("run {i}"), plot::instability_points(history)))
        .collect();
    plot::line_chart(&out.join("instability.svg"), "Instability per epoch", "epoch", "IS", &curves)?;
    Ok(())
}

fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return Err(Error::Config("--alphas needs at least one value".into()).into());
    }
    parts
        .into_iter()
        .map(|p| {
            p.parse::<f64>()
                .ok()
                .filter(|a| a.is_finite() && *a >= 0.0)
                .ok_or_else(|| Error::Config(format!("--alphas: `{p}` is not a non-negative number")).into())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn probe_noise(
    checkpoint: &Path,
    data: &Path,
    alphas: &str,
    trials: usize,
    seed: u64,
    args: &ConfigArgs,
    out: &Path,
    split: &str,
) -> Result<()> {
    let alphas = parse_alphas(alphas)?;
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()).into());
    }
    let cfg = load_config(args)?;
    cfg.train.eval.validate()?;
    let split = parse_split(split)?;
    let ds = Dataset::load(data)?;
    let det = load_detector(checkpoint, &ds)?;
    let caches = ds
        .split(split)
        .into_iter()
        .map(|v| ProbeCache::build(&det, &v.features))
        .collect::<timedet::Result<Vec<_>>>()?;
    if caches.is_empty() {
        return Err(Error::Data(format!("dataset has no {} videos", split.as_str())).into());
    }
    let gts = ds.ground_truth(split);
    let mut results: Vec<ProbeResult> = Vec::new();
    for target in [NoiseTarget::Center, NoiseTarget::Width] {
        for &a in &alphas {
            results.push(noise_probe(&caches, &gts, &cfg.train.eval, a, target, trials, seed)?);
        }
    }
    create_dir(out)?;
    write_json(&out.join("probe.json"), &results)?;
    let mut text = format!("{:>8} {:>8} {:>10} {:>10}\n", "target", "alpha", "clean", "delta");
    for r in &results {
        text.push_str(&format!("{:>8} {:>8} {:>10.4} {:>+10.4}\n", r.target.as_str(), r.noise_alpha, r.clean, r.delta));
    }
    fs::write(out.join("probe.txt"), &text)?;
    print!("{text}");
    plot::probe_chart(&out.join("probe.svg"), &results)?;
    Ok(())
}
