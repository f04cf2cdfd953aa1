//! Image scoring, benchmark rows, the batch-statistics bias experiment,
//! feature extraction and latency summaries.

use crate::corrupt::{apply_corruption, CorruptionSpec};
use crate::error::{Error, Result};
use crate::image::{write_patch_chw, Image, PixelSource};
use crate::metrics::detection;
use crate::model::{DisCoPatch, NormKind};
use crate::norm::{GroupLayout, StatsSource};
use crate::patching::{image_anomaly_score, make_inference_group, CropMode, PatchBatch};
use crate::real::Real;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

/// Default number of patches scored per image.
pub const DEFAULT_EVAL_PATCHES: usize = 64;

/// How images are turned into patch groups and scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub n_patches: usize,
    pub crop: CropMode,
    pub seed: u64,
    /// Images whose groups share one forward pass. Per-group statistics keep
    /// the scores independent of this value.
    pub images_per_forward: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            n_patches: DEFAULT_EVAL_PATCHES,
            crop: CropMode::Random,
            seed: 0,
            images_per_forward: 4,
        }
    }
}

impl ScoreOptions {
    pub fn with_patches(n_patches: usize, seed: u64) -> Self {
        ScoreOptions {
            n_patches,
            seed,
            ..Self::default()
        }
    }
}

/// The patch group of one image. Crops are drawn from a generator seeded by
/// the run seed and the image key, so an image scores the same wherever it
/// appears.
pub fn image_group<T: Real, S: PixelSource + ?Sized>(
    img: &S,
    key: &str,
    source: usize,
    patch: usize,
    opts: &ScoreOptions,
) -> Result<PatchBatch<T>> {
    let mut rng = rng_from_seed(derive_seed(opts.seed, key.as_bytes()));
    make_inference_group(img, source, opts.n_patches, patch, opts.crop, &mut rng)
}

fn checked_realness<T: Real>(values: Vec<T>) -> Result<Vec<T>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("discriminator produced {:?}", v.as_f64())));
    }
    Ok(values)
}

/// Anomaly score of every image (`1 − mean realness` over its patch group).
pub fn score_images<T: Real, S: PixelSource + ?Sized>(
    model: &DisCoPatch<T>,
    images: &[(&str, &S)],
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    if opts.n_patches == 0 {
        return Err(Error::Empty("score_images"));
    }
    // A plain batch-norm discriminator pools everything it sees, so each
    // image must get its own forward pass.
    let chunk = if model.config.norm_kind == NormKind::Batch {
        1
    } else {
        opts.images_per_forward.max(1)
    };
    let patch = model.config.patch_size;
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk) {
        let groups = part
            .iter()
            .enumerate()
            .map(|(i, (key, img))| image_group(*img, key, i, patch, opts))
            .collect::<Result<Vec<PatchBatch<T>>>>()?;
        let batch = PatchBatch::concat(&groups)?;
        let real = checked_realness(model.discriminate(&batch.data, StatsSource::Batch(batch.layout))?)?;
        for g in real.chunks(opts.n_patches) {
            out.push(image_anomaly_score(g)?);
        }
    }
    Ok(out)
}

pub fn score_image<T: Real, S: PixelSource + ?Sized>(
    model: &DisCoPatch<T>,
    img: &S,
    key: &str,
    opts: &ScoreOptions,
) -> Result<f64> {
    Ok(score_images(model, &[(key, img)], opts)?[0])
}

/// Mean and standard deviation of one image's score over `trials`
/// independent patch samplings (seeds `opts.seed + t`).
pub fn score_spread<T: Real, S: PixelSource + ?Sized>(
    model: &DisCoPatch<T>,
    img: &S,
    key: &str,
    opts: &ScoreOptions,
    trials: usize,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::Empty("score_spread"));
    }
    let scores = (0..trials as u64)
        .map(|t| {
            let o = ScoreOptions {
                seed: opts.seed.wrapping_add(t),
                ..*opts
            };
            score_image(model, img, key, &o)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = scores.iter().sum::<f64>() / trials as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / trials as f64;
    Ok((mean, libm::sqrt(var)))
}

/// One benchmark line.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub n_id: usize,
    pub n_ood: usize,
    pub auroc: f64,
    pub fpr95: f64,
}

/// One row per OOD set against the shared ID scores.
pub fn evaluate(id_scores: &[f64], ood_sets: &[(&str, &[f64])]) -> Result<Vec<EvalRow>> {
    ood_sets
        .iter()
        .map(|(name, ood)| {
            let d = detection(id_scores, ood)?;
            Ok(EvalRow {
                dataset: String::from(*name),
                n_id: id_scores.len(),
                n_ood: ood.len(),
                auroc: d.auroc,
                fpr95: d.fpr95,
            })
        })
        .collect()
}

/// Unweighted mean of `(auroc, fpr95)` over rows.
pub fn mean_metrics(rows: &[EvalRow]) -> Option<(f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((
        rows.iter().map(|r| r.auroc).sum::<f64>() / n,
        rows.iter().map(|r| r.fpr95).sum::<f64>() / n,
    ))
}

/// Corrupted copies of `images`; the noise stream of each copy depends on the
/// run seed, the image key and the corruption label.
pub fn corrupt_set<S: PixelSource + ?Sized>(
    images: &[(&str, &S)],
    spec: CorruptionSpec,
    seed: u64,
    to_image: impl Fn(&S) -> Image,
) -> Result<Vec<Image>> {
    let label = spec.label();
    images
        .iter()
        .map(|(key, img)| {
            let mut rng = rng_from_seed(derive_seed(seed, format!("{}/{}", key, label).as_bytes()));
            apply_corruption(&to_image(img), spec, &mut rng)
        })
        .collect()
}

/// Which normalization statistics the batch-bias experiment scores with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasMode {
    /// Running statistics accumulated during training.
    LearnedStats,
    /// Statistics of the current scoring batch.
    BatchStats,
}

impl BiasMode {
    pub fn name(&self) -> &'static str {
        match self {
            BiasMode::LearnedStats => "learned",
            BiasMode::BatchStats => "batch",
        }
    }
}

impl core::str::FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" | "learned_stats" => Ok(BiasMode::LearnedStats),
            "batch" | "batch_stats" => Ok(BiasMode::BatchStats),
            _ => Err(Error::param("bias_mode", format!("unknown mode {:?}", s))),
        }
    }
}

/// Central `size × size` window of an image as one network input.
fn whole_image_input<T: Real, S: PixelSource + ?Sized>(img: &S, size: usize, out: &mut [T]) -> Result<()> {
    if img.width() < size || img.height() < size {
        return Err(Error::shape(
            "batch_bias",
            format!("image {}×{} smaller than input {}", img.width(), img.height(), size),
        ));
    }
    write_patch_chw(img, (img.width() - size) / 2, (img.height() - size) / 2, size, out);
    Ok(())
}

/// Scores a homogeneous image set in batches of `batch_size` after a seeded
/// shuffle, one input per image. The last batch may be short. Scores come
/// back in the original order.
pub fn score_in_batches<T: Real, S: PixelSource + ?Sized>(
    model: &DisCoPatch<T>,
    images: &[&S],
    batch_size: usize,
    mode: BiasMode,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::param("batch_bias", "batch size must be positive"));
    }
    let size = model.config.patch_size;
    let per = 3 * size * size;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut scores = vec![0.0; images.len()];
    for idx in order.chunks(batch_size) {
        let mut data = vec![T::zero(); idx.len() * per];
        for (slot, &i) in idx.iter().enumerate() {
            whole_image_input(images[i], size, &mut data[slot * per..(slot + 1) * per])?;
        }
        let x = Tensor::new(&[idx.len(), 3, size, size], data)?;
        let source = match mode {
            BiasMode::LearnedStats => StatsSource::Running,
            BiasMode::BatchStats => StatsSource::Batch(GroupLayout::single(idx.len())?),
        };
        let real = checked_realness(model.discriminate(&x, source)?)?;
        for (&i, r) in idx.iter().zip(real) {
            scores[i] = 1.0 - r.as_f64();
        }
    }
    Ok(scores)
}

/// One cell of the batch-bias grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasRow {
    pub mode: BiasMode,
    pub batch_size: usize,
    pub dataset: String,
    pub auroc: f64,
    pub fpr95: f64,
    /// The batch size exceeded a set, so that set was scored as one short batch.
    pub truncated: bool,
}

/// Scores ID and every OOD set for each mode and batch size, batches never
/// mixing sets.
pub fn batch_bias_grid<T: Real, S: PixelSource + ?Sized>(
    model: &DisCoPatch<T>,
    id: &[&S],
    ood_sets: &[(&str, Vec<&S>)],
    batch_sizes: &[usize],
    modes: &[BiasMode],
    seed: u64,
) -> Result<Vec<BiasRow>> {
    let mut rows = Vec::new();
    for &mode in modes {
        for &bs in batch_sizes {
            let id_scores = score_in_batches(model, id, bs, mode, seed)?;
            for (name, ood) in ood_sets {
                let ood_scores = score_in_batches(model, ood, bs, mode, seed ^ 0x5bd1_e995)?;
                let d = detection(&id_scores, &ood_scores)?;
                rows.push(BiasRow {
                    mode,
                    batch_size: bs,
                    dataset: String::from(*name),
                    auroc: d.auroc,
                    fpr95: d.fpr95,
                    truncated: bs > id.len() || bs > ood.len(),
                });
            }
        }
    }
    Ok(rows)
}

/// Mean over an image's patch group of the discriminator trunk activations.
pub fn image_features<T: Real, S: PixelSource + ?Sized>(
    model: &DisCoPatch<T>,
    img: &S,
    key: &str,
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let group: PatchBatch<T> = image_group(img, key, 0, model.config.patch_size, opts)?;
    let f = model.features(&group.data, StatsSource::Batch(group.layout))?;
    let width = f.shape()[1];
    let mut mean = vec![0.0; width];
    for row in f.data().chunks(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    let n = group.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Summary of per-image latencies in milliseconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyStats {
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles; an empty sample gives the all-zero report.
    pub fn from_millis(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let pct = |p: usize| s[((p * n).div_ceil(100)).clamp(1, n) - 1];
        LatencyStats {
            runs: n,
            mean_ms: mean,
            std_ms: libm::sqrt(var),
            min_ms: s[0],
            p50_ms: pct(50),
            p90_ms: pct(90),
            p99_ms: pct(99),
            max_ms: s[n - 1],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrupt::CorruptionKind;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn noise(size: usize, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        Image::from_fn(size, size, |_, _, _| rng.random::<f32>())
    }

    fn micro() -> DisCoPatch<f32> {
        DisCoPatch::new(ModelConfig::micro(), 4).unwrap()
    }

    #[test]
    fn grouping_does_not_change_scores() {
        let model = micro();
        let imgs: Vec<Image> = (0..5).map(|s| noise(16, s)).collect();
        let keys: Vec<String> = (0..5).map(|i| format!("img{}", i)).collect();
        let items: Vec<(&str, &Image)> = keys.iter().map(|k| k.as_str()).zip(imgs.iter()).collect();
        let mut opts = ScoreOptions::with_patches(3, 11);
        opts.images_per_forward = 1;
        let single = score_images(&model, &items, &opts).unwrap();
        opts.images_per_forward = 3;
        let pooled = score_images(&model, &items, &opts).unwrap();
        for (a, b) in single.iter().zip(&pooled) {
            assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
        let alone = score_image(&model, &imgs[2], "img2", &opts).unwrap();
        assert!((alone - single[2]).abs() <= 1e-6);
        assert!(single.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn same_set_gives_half_auroc() {
        let model = micro();
        let imgs: Vec<Image> = (0..6).map(|s| noise(16, s)).collect();
        let keys: Vec<String> = (0..6).map(|i| format!("{}.png", i)).collect();
        let items: Vec<(&str, &Image)> = keys.iter().map(|k| k.as_str()).zip(imgs.iter()).collect();
        let opts = ScoreOptions::with_patches(2, 1);
        let a = score_images(&model, &items, &opts).unwrap();
        let b = score_images(&model, &items, &opts).unwrap();
        let rows = evaluate(&a, &[("copy", &b), ("again", &a)]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].auroc, 0.5);
        assert_eq!(mean_metrics(&rows).unwrap().0, 0.5);
    }

    fn full_image_micro() -> DisCoPatch<f32> {
        let mut cfg = ModelConfig::micro();
        cfg.norm_kind = NormKind::Batch;
        cfg.disc_track_running_stats = true;
        let mut m = DisCoPatch::new(cfg, 2).unwrap();
        for st in &mut m.discriminator.stages {
            st.norm.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f32);
            st.norm.running_var.iter_mut().for_each(|v| *v = 0.7);
        }
        m
    }

    #[test]
    fn learned_stats_ignore_batch_companions() {
        let model = full_image_micro();
        let imgs: Vec<Image> = (0..7).map(|s| noise(8, s)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let one = score_in_batches(&model, &refs, 1, BiasMode::LearnedStats, 3).unwrap();
        let three = score_in_batches(&model, &refs, 3, BiasMode::LearnedStats, 3).unwrap();
        for (a, b) in one.iter().zip(&three) {
            assert!((a - b).abs() <= 1e-6);
        }
        let b1 = score_in_batches(&model, &refs, 1, BiasMode::BatchStats, 3).unwrap();
        let b3 = score_in_batches(&model, &refs, 3, BiasMode::BatchStats, 3).unwrap();
        assert!(b1.iter().zip(&b3).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn batch_size_one_is_instance_statistics() {
        let model = full_image_micro();
        let img = noise(8, 9);
        let a = score_in_batches(&model, &[&img], 1, BiasMode::BatchStats, 0).unwrap();
        let mut cfg = model.config.clone();
        cfg.norm_kind = NormKind::Instance;
        let mut inst = model.clone();
        inst.config = cfg;
        inst.discriminator.norm_kind = NormKind::Instance;
        let b = score_in_batches(&inst, &[&img], 1, BiasMode::BatchStats, 0).unwrap();
        assert!((a[0] - b[0]).abs() <= 1e-6);
    }

    #[test]
    fn bias_grid_shape_and_truncation() {
        let model = full_image_micro();
        let id: Vec<Image> = (0..5).map(|s| noise(8, s)).collect();
        let ood: Vec<Image> = (10..14).map(|s| noise(8, s)).collect();
        let id_refs: Vec<&Image> = id.iter().collect();
        let sets = [("noise", ood.iter().collect::<Vec<_>>())];
        let rows = batch_bias_grid(
            &model,
            &id_refs,
            &sets,
            &[1, 2, 8],
            &[BiasMode::LearnedStats, BiasMode::BatchStats],
            0,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().filter(|r| r.truncated).all(|r| r.batch_size == 8));
        assert!(rows[0].auroc == rows[1].auroc && rows[1].auroc == rows[2].auroc);
        assert_eq!("batch_stats".parse::<BiasMode>().unwrap(), BiasMode::BatchStats);
    }

    #[test]
    fn features_have_flat_width_and_repeat() {
        let model = micro();
        let img = noise(16, 0);
        let opts = ScoreOptions::with_patches(3, 5);
        let a = image_features(&model, &img, "x", &opts).unwrap();
        let b = image_features(&model, &img, "x", &opts).unwrap();
        assert_eq!(a.len(), model.config.flat_width());
        assert_eq!(a, b);
        assert_eq!(ModelConfig::paper_patches().flat_width(), 16384);
    }

    #[test]
    fn corrupted_sets_are_keyed() {
        let imgs = [noise(8, 1), noise(8, 2)];
        let items = [("a", &imgs[0]), ("b", &imgs[1])];
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap();
        let x = corrupt_set(&items, spec, 7, |i| i.clone()).unwrap();
        let y = corrupt_set(&items, spec, 7, |i| i.clone()).unwrap();
        assert_eq!(x, y);
        assert_ne!(x[0], imgs[0]);
    }

    #[test]
    fn latency_summary() {
        assert_eq!(LatencyStats::from_millis(&[]), LatencyStats::default());
        let s: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let l = LatencyStats::from_millis(&s);
        assert_eq!((l.runs, l.min_ms, l.p50_ms, l.p90_ms, l.p99_ms, l.max_ms), (100, 1.0, 50.0, 90.0, 99.0, 100.0));
        assert_eq!(l.mean_ms, 50.5);
        assert!(l.mean_ms >= l.min_ms && l.min_ms >= 0.0);
    }
}
