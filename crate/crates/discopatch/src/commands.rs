//! Experiment drivers shared by the binary and the integration tests.

use crate::checkpoint::save_model;
use crate::codec::save_image;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, ManifestRow};
use discopatch_core::corrupt::{CorruptionKind, CorruptionSpec};
use discopatch_core::eval::{
    batch_bias_grid, corrupt_set, evaluate, image_features, mean_metrics, score_images, BiasMode, BiasRow, EvalRow,
    LatencyStats, ScoreOptions,
};
use discopatch_core::rng::derive_seed;
use discopatch_core::train::EpochReport;
use discopatch_core::{DisCoPatch, PixelSource, Rgb8, Trainer};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const LOG_FILE: &str = "train_log.csv";
pub const MODEL_FILE: &str = "model.dcpk";
pub const CONFIG_FILE: &str = "config.toml";

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub l_dcp: f64,
    pub l_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

pub fn new_model(cfg: &RunConfig) -> Result<DisCoPatch<f32>> {
    Ok(DisCoPatch::new(cfg.model_config()?, derive_seed(cfg.train.seed, b"init"))?)
}

/// Trains a fresh model on `images`. With `out`, writes the step log, periodic
/// checkpoints, the final model and the effective config there.
pub fn fit(
    cfg: &RunConfig,
    images: &[Rgb8],
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<DisCoPatch<f32>> {
    cfg.validate()?;
    let mut trainer = Trainer::new(new_model(cfg)?, cfg.train_config()?)?;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            crate::codec::write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
            Some(csv::Writer::from_path(dir.join(LOG_FILE))?)
        }
        None => None,
    };
    for epoch in 0..cfg.train.epochs {
        let (report, steps) = trainer.run_epoch(images)?;
        if let Some(w) = log.as_mut() {
            for s in &steps {
                w.serialize(LogRow {
                    epoch,
                    step: s.step,
                    l_dcp: s.l_dcp,
                    l_d: s.l_d,
                    d_real: s.d_real,
                    d_fake: s.d_fake,
                })?;
            }
            w.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        on_epoch(&report);
        let every = cfg.train.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.train.epochs {
                save_model(&dir.join(format!("checkpoint_epoch{:03}.dcpk", epoch + 1)), &trainer.model, cfg)?;
            }
        }
    }
    if let Some(dir) = out {
        save_model(&dir.join(MODEL_FILE), &trainer.model, cfg)?;
    }
    Ok(trainer.model)
}

pub fn parse_kinds(list: &str) -> Result<Vec<CorruptionKind>> {
    if list == "all" {
        return Ok(CorruptionKind::ALL.to_vec());
    }
    list.split(',').map(|k| Ok(k.trim().parse::<CorruptionKind>()?)).collect()
}

/// Accepts `3`, `1-5` or `1,3,5`.
pub fn parse_severities(s: &str) -> Result<Vec<u8>> {
    let bad = || Error::Usage(format!("bad severity list {:?}", s));
    let out: Vec<u8> = if let Some((a, b)) = s.split_once('-') {
        let (a, b) = (a.trim().parse::<u8>().map_err(|_| bad())?, b.trim().parse::<u8>().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|v| v.trim().parse::<u8>().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if out.is_empty() || out.iter().any(|&v| !(1..=5).contains(&v)) {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = s
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Usage(format!("bad {} list {:?}", what, s))))
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(Error::Usage(format!("{} must be positive", what)));
    }
    Ok(out)
}

/// Corrupted copies of a dataset, one image per input image.
pub fn corrupt_images(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Vec<Rgb8>> {
    let imgs = corrupt_set(&ds.items(), spec, seed, |i: &Rgb8| i.to_image())?;
    Ok(imgs.iter().map(|i| i.to_rgb8()).collect())
}

/// Writes `out/<kind>-<severity>/<name>.png` for every combination plus a
/// manifest covering all of them.
pub fn corrupt_dir(
    ds: &Dataset,
    out: &Path,
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &sev in severities {
            let spec = CorruptionSpec::new(kind, sev)?;
            let sub = out.join(spec.label());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (key, img) in ds.keys.iter().zip(corrupt_images(ds, spec, seed)?) {
                let name = format!("{}.png", Path::new(key).file_stem().unwrap_or_default().to_string_lossy());
                save_image(&img, &sub.join(&name))?;
                rows.push(ManifestRow {
                    path: format!("{}/{}", spec.label(), name),
                    kind: kind.name().into(),
                    severity: sev,
                    source: key.clone(),
                });
            }
        }
    }
    write_manifest(&out.join("manifest.csv"), &rows)?;
    Ok(rows)
}

pub fn score_dataset(model: &DisCoPatch<f32>, ds: &Dataset, opts: &ScoreOptions) -> Result<Vec<f64>> {
    Ok(score_images(model, &ds.items(), opts)?)
}

/// ID against each OOD set, one row per set.
pub fn eval_sets(model: &DisCoPatch<f32>, opts: &ScoreOptions, id: &Dataset, ood: &[(String, Dataset)]) -> Result<Vec<EvalRow>> {
    let id_scores = score_dataset(model, id, opts)?;
    let ood_scores = ood
        .iter()
        .map(|(name, ds)| Ok((name.as_str(), score_dataset(model, ds, opts)?)))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<(&str, &[f64])> = ood_scores.iter().map(|(n, s)| (*n, s.as_slice())).collect();
    Ok(evaluate(&id_scores, &sets)?)
}

#[derive(Serialize)]
struct EvalCsvRow<'a> {
    dataset: &'a str,
    n_id: usize,
    n_ood: usize,
    auroc: f64,
    fpr95: f64,
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(EvalCsvRow {
            dataset: &r.dataset,
            n_id: r.n_id,
            n_ood: r.n_ood,
            auroc: r.auroc,
            fpr95: r.fpr95,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::codec::write_atomic(path, &bytes)
}

/// Fixed-width table with an unweighted mean row.
pub fn eval_table(rows: &[EvalRow]) -> String {
    let width = rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>7}  {:>7}\n", "dataset", "n_id", "n_ood", "auroc", "fpr95");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>7.3}  {:>7.3}", r.dataset, r.n_id, r.n_ood, r.auroc, r.fpr95);
    }
    if let Some((a, f)) = mean_metrics(rows) {
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>7.3}  {:>7.3}", "mean", "", "", a, f);
    }
    s
}

pub fn bias_grid(
    model: &DisCoPatch<f32>,
    id: &Dataset,
    ood: &[(String, Dataset)],
    batch_sizes: &[usize],
    modes: &[BiasMode],
    seed: u64,
) -> Result<Vec<BiasRow>> {
    let sets: Vec<(&str, Vec<&Rgb8>)> = ood.iter().map(|(n, d)| (n.as_str(), d.refs())).collect();
    Ok(batch_bias_grid(model, &id.refs(), &sets, batch_sizes, modes, seed)?)
}

#[derive(Serialize)]
struct BiasCsvRow<'a> {
    mode: &'a str,
    batch_size: usize,
    dataset: &'a str,
    auroc: f64,
    fpr95: f64,
}

pub fn write_bias_csv(path: &Path, rows: &[BiasRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(BiasCsvRow {
            mode: r.mode.name(),
            batch_size: r.batch_size,
            dataset: &r.dataset,
            auroc: r.auroc,
            fpr95: r.fpr95,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::codec::write_atomic(path, &bytes)
}

/// One line per batch size, one `AUROC/FPR95` column per mode and dataset.
pub fn bias_table(rows: &[BiasRow]) -> String {
    let mut cols: Vec<(BiasMode, &str)> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for r in rows {
        if !cols.contains(&(r.mode, r.dataset.as_str())) {
            cols.push((r.mode, &r.dataset));
        }
        if !sizes.contains(&r.batch_size) {
            sizes.push(r.batch_size);
        }
    }
    let mut s = String::from("batch");
    for (m, d) in &cols {
        let _ = write!(s, "  {:>24}", format!("{}:{}", m.name(), d));
    }
    s.push('\n');
    for bs in sizes {
        let _ = write!(s, "{:>5}", bs);
        for (m, d) in &cols {
            let cell = rows
                .iter()
                .find(|r| r.batch_size == bs && r.mode == *m && r.dataset == *d)
                .map(|r| format!("{:.1}/{:.1}{}", 100.0 * r.auroc, 100.0 * r.fpr95, if r.truncated { "*" } else { "" }))
                .unwrap_or_default();
            let _ = write!(s, "  {:>24}", cell);
        }
        s.push('\n');
    }
    s
}

/// Wall-clock milliseconds of `runs` single-image scorings, each drawing its
/// own patch sample, after `warmup` untimed runs.
pub fn bench<S: PixelSource>(model: &DisCoPatch<f32>, img: &S, runs: usize, warmup: usize, opts: &ScoreOptions) -> Result<LatencyStats> {
    let one = |i: usize| -> Result<f64> {
        let o = ScoreOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..*opts
        };
        Ok(score_images(model, &[("bench", img)], &o)?[0])
    };
    for i in 0..warmup {
        std::hint::black_box(one(i)?);
    }
    let mut ms = Vec::with_capacity(runs);
    for i in 0..runs {
        let t = Instant::now();
        std::hint::black_box(one(warmup + i)?);
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_millis(&ms))
}

pub fn bench_report(s: &LatencyStats) -> String {
    format!(
        "runs {}  mean {:.3} ms  std {:.3}  min {:.3}  p50 {:.3}  p90 {:.3}  p99 {:.3}  max {:.3}",
        s.runs, s.mean_ms, s.std_ms, s.min_ms, s.p50_ms, s.p90_ms, s.p99_ms, s.max_ms
    )
}

/// `image,f0,f1,...` with one row per image.
pub fn export_features(model: &DisCoPatch<f32>, ds: &Dataset, opts: &ScoreOptions, path: &Path) -> Result<usize> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut width = None;
    for (key, img) in ds.items() {
        let f = image_features(model, img, key, opts)?;
        if width.is_none() {
            let mut header = vec!["image".to_string()];
            header.extend((0..f.len()).map(|i| format!("f{}", i)));
            w.write_record(&header)?;
            width = Some(f.len());
        }
        let mut rec = vec![key.to_string()];
        rec.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::codec::write_atomic(path, &bytes)?;
    Ok(width.unwrap_or(0))
}

/// Set name for a directory: its last path component.
pub fn dir_label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

pub fn load_sets(dirs: &[PathBuf], size: usize) -> Result<Vec<(String, Dataset)>> {
    dirs.iter().map(|d| Ok((dir_label(d), crate::dataset::load_dir(d, size)?))).collect()
}
