//! Run configuration: one TOML file with `[model]`, `[norm]`, `[train]`,
//! `[weights]` and `[eval]` sections. Every key is optional and falls back to
//! the `desk` preset; command-line flags override file values.
//!
//! ```toml
//! [model]
//! latent_dim = 128
//! hidden_dims = [32, 64, 128]
//! patch_size = 32
//! leaky_slope = 0.01
//! norm = "patch"              # batch | patch | instance | group:<groups>
//! disc_track_running_stats = false
//! disc_stats_grad = true
//!
//! [norm]
//! momentum = 0.1
//! eps = 1e-5
//!
//! [train]
//! image_size = 256            # images are standardized to this square size
//! lr = 8.5e-5
//! batch_images = 16
//! patches_per_image = 48
//! epochs = 30
//! seed = 0
//! prob_clamp = 1e-4
//! adversarial_form = "one-minus-log"   # or "non-saturating"
//! disc_objective = "cross-entropy"      # or "log-odds"
//! shared_disc_forward = false
//! checkpoint_every = 5        # epochs; 0 disables intermediate checkpoints
//!
//! [weights]
//! kl = 1e-4
//! rec = 1e-3
//! gen = 1e-3
//!
//! [eval]
//! n_patches = 64
//! seed = 0
//! crop = "random"             # or "tiled"
//! ```

use crate::error::{Error, Result};
use discopatch_core::eval::ScoreOptions;
use discopatch_core::patching::CropMode;
use discopatch_core::train::{AdversarialForm, DiscObjective};
use discopatch_core::{LossWeights, ModelConfig, NormKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub patch_size: usize,
    pub leaky_slope: f64,
    pub norm: String,
    pub disc_track_running_stats: bool,
    pub disc_stats_grad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormSection {
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub image_size: usize,
    pub lr: f64,
    pub batch_images: usize,
    pub patches_per_image: usize,
    pub epochs: usize,
    pub seed: u64,
    pub prob_clamp: f64,
    pub adversarial_form: String,
    pub disc_objective: String,
    pub shared_disc_forward: bool,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub kl: f64,
    pub rec: f64,
    pub gen: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_patches: usize,
    pub seed: u64,
    pub crop: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub norm: NormSection,
    pub train: TrainSection,
    pub weights: WeightsSection,
    pub eval: EvalSection,
}

pub const PRESETS: [&str; 3] = ["desk", "desk-full-image", "paper-patches"];

impl Default for ModelSection {
    fn default() -> Self {
        RunConfig::desk().model
    }
}

impl Default for NormSection {
    fn default() -> Self {
        RunConfig::desk().norm
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        RunConfig::desk().train
    }
}

impl Default for WeightsSection {
    fn default() -> Self {
        RunConfig::desk().weights
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        RunConfig::desk().eval
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

pub fn norm_kind_name(kind: NormKind) -> String {
    match kind {
        NormKind::Group(g) => format!("group:{}", g),
        k => k.name().to_string(),
    }
}

pub fn parse_norm_kind(s: &str) -> Result<NormKind> {
    match s {
        "batch" => Ok(NormKind::Batch),
        "patch" => Ok(NormKind::Patch),
        "instance" => Ok(NormKind::Instance),
        _ => s
            .strip_prefix("group:")
            .and_then(|g| g.parse().ok())
            .map(NormKind::Group)
            .ok_or_else(|| Error::Config(format!("unknown norm {:?}", s))),
    }
}

fn form_name(f: AdversarialForm) -> &'static str {
    match f {
        AdversarialForm::OneMinusLog => "one-minus-log",
        AdversarialForm::NonSaturating => "non-saturating",
    }
}

fn parse_form(s: &str) -> Result<AdversarialForm> {
    match s {
        "one-minus-log" => Ok(AdversarialForm::OneMinusLog),
        "non-saturating" => Ok(AdversarialForm::NonSaturating),
        _ => Err(Error::Config(format!("unknown adversarial_form {:?}", s))),
    }
}

fn objective_name(o: DiscObjective) -> &'static str {
    match o {
        DiscObjective::CrossEntropy => "cross-entropy",
        DiscObjective::LogOdds => "log-odds",
    }
}

fn parse_objective(s: &str) -> Result<DiscObjective> {
    match s {
        "cross-entropy" => Ok(DiscObjective::CrossEntropy),
        "log-odds" => Ok(DiscObjective::LogOdds),
        _ => Err(Error::Config(format!("unknown disc_objective {:?}", s))),
    }
}

pub fn parse_crop(s: &str) -> Result<CropMode> {
    match s {
        "random" => Ok(CropMode::Random),
        "tiled" => Ok(CropMode::Tiled),
        _ => Err(Error::Config(format!("unknown crop {:?}", s))),
    }
}

impl RunConfig {
    fn from_parts(model: &ModelConfig, train: &TrainConfig, image_size: usize, n_patches: usize) -> Self {
        RunConfig {
            model: ModelSection {
                latent_dim: model.latent_dim,
                hidden_dims: model.hidden_dims.clone(),
                patch_size: model.patch_size,
                leaky_slope: model.leaky_slope,
                norm: norm_kind_name(model.norm_kind),
                disc_track_running_stats: model.disc_track_running_stats,
                disc_stats_grad: model.disc_stats_grad,
            },
            norm: NormSection {
                momentum: model.momentum,
                eps: model.eps,
            },
            train: TrainSection {
                image_size,
                lr: train.lr,
                batch_images: train.batch_images,
                patches_per_image: train.patches_per_image,
                epochs: train.epochs,
                seed: train.seed,
                prob_clamp: train.prob_clamp,
                adversarial_form: form_name(train.adversarial_form).into(),
                disc_objective: objective_name(train.disc_objective).into(),
                shared_disc_forward: train.shared_disc_forward,
                checkpoint_every: 5,
            },
            weights: WeightsSection {
                kl: train.weights.kl,
                rec: train.weights.rec,
                gen: train.weights.gen,
            },
            eval: EvalSection {
                n_patches,
                seed: 0,
                crop: "random".into(),
            },
        }
    }

    /// The published patch configuration: 64×64 patches, 48 per image,
    /// 30 epochs, latent 1024, hidden 128..1024, lr 8.5e-5.
    pub fn paper_patches() -> Self {
        RunConfig::from_parts(&ModelConfig::paper_patches(), &TrainConfig::default(), 256, 64)
    }

    /// Desk-scale patch model: 32×32 patches, hidden 32/64/128, latent 128.
    pub fn desk() -> Self {
        let train = TrainConfig {
            lr: 2e-4,
            batch_images: 16,
            patches_per_image: 2,
            ..TrainConfig::default()
        };
        RunConfig::from_parts(&ModelConfig::desk(), &train, 256, 64)
    }

    /// Whole-image desk model on 32×32 images whose discriminator tracks
    /// running statistics.
    pub fn desk_full_image() -> Self {
        let train = TrainConfig {
            lr: 2e-4,
            batch_images: 32,
            patches_per_image: 1,
            ..TrainConfig::default()
        };
        RunConfig::from_parts(&ModelConfig::desk_full_image(), &train, 32, 1)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "desk-full-image" => Ok(RunConfig::desk_full_image()),
            "paper-patches" => Ok(RunConfig::paper_patches()),
            _ => Err(Error::Config(format!("unknown preset {:?} (known: {})", name, PRESETS.join(", ")))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            latent_dim: m.latent_dim,
            hidden_dims: m.hidden_dims.clone(),
            patch_size: m.patch_size,
            in_channels: 3,
            leaky_slope: m.leaky_slope,
            norm_kind: parse_norm_kind(&m.norm)?,
            momentum: self.norm.momentum,
            eps: self.norm.eps,
            disc_track_running_stats: m.disc_track_running_stats,
            disc_stats_grad: m.disc_stats_grad,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            lr: t.lr,
            batch_images: t.batch_images,
            patches_per_image: t.patches_per_image,
            epochs: t.epochs,
            seed: t.seed,
            prob_clamp: t.prob_clamp,
            weights: LossWeights {
                kl: self.weights.kl,
                rec: self.weights.rec,
                gen: self.weights.gen,
            },
            adversarial_form: parse_form(&t.adversarial_form)?,
            disc_objective: parse_objective(&t.disc_objective)?,
            shared_disc_forward: t.shared_disc_forward,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn score_options(&self) -> Result<ScoreOptions> {
        Ok(ScoreOptions {
            n_patches: self.eval.n_patches,
            crop: parse_crop(&self.eval.crop)?,
            seed: self.eval.seed,
            ..ScoreOptions::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        self.train_config()?;
        self.score_options()?;
        if self.train.image_size < model.patch_size {
            return Err(Error::Config(format!(
                "image_size {} smaller than patch_size {}",
                self.train.image_size, model.patch_size
            )));
        }
        if self.train.seed > i64::MAX as u64 || self.eval.seed > i64::MAX as u64 {
            return Err(Error::Config("seeds must fit in a signed 64-bit integer".into()));
        }
        if self.eval.n_patches == 0 {
            return Err(Error::Config("eval.n_patches must be positive".into()));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the serialized configuration.
    pub fn fingerprint(&self) -> u64 {
        discopatch_core::rng::fnv1a(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_validate_and_match_published_settings() {
        for name in PRESETS {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        let p = RunConfig::paper_patches();
        assert_eq!(p.model.latent_dim, 1024);
        assert_eq!(p.model.hidden_dims, vec![128, 256, 512, 1024]);
        assert_eq!((p.model.patch_size, p.eval.n_patches), (64, 64));
        assert_eq!((p.train.lr, p.train.patches_per_image, p.train.epochs), (8.5e-5, 48, 30));
        assert_eq!((p.weights.kl, p.weights.rec, p.weights.gen), (1e-4, 1e-3, 1e-3));
        let d = RunConfig::desk();
        assert_eq!((d.model.patch_size, d.model.latent_dim), (32, 128));
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn missing_keys_fall_back_and_unknown_keys_fail() {
        let c = RunConfig::parse("[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model, RunConfig::desk().model);
        assert!(RunConfig::parse("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::parse("[model]\nnorm = \"layer\"\n").is_err());
        assert!(RunConfig::parse("[model]\npatch_size = 300\n").is_err());
    }

    #[test]
    fn norm_names_round_trip() {
        for k in [NormKind::Batch, NormKind::Patch, NormKind::Instance, NormKind::Group(4)] {
            assert_eq!(parse_norm_kind(&norm_kind_name(k)).unwrap(), k);
        }
    }

    proptest! {
        #[test]
        fn text_round_trip(lr in 1e-7f64..1e-1, momentum in 0.0f64..=1.0, eps in 1e-9f64..1e-2,
                           kl in 0.0f64..1.0, seed in 0u64..i64::MAX as u64, epochs in 1usize..100,
                           groups in 1usize..4, norm in 0usize..4) {
            let mut c = RunConfig::desk();
            c.train.lr = lr;
            c.norm.momentum = momentum;
            c.norm.eps = eps;
            c.weights.kl = kl;
            c.train.seed = seed;
            c.eval.seed = seed / 3;
            c.train.epochs = epochs;
            c.model.norm = ["batch", "patch", "instance", "group:"][norm].to_string();
            if norm == 3 {
                c.model.norm.push_str(&[1, 2, 4][groups - 1].to_string());
            }
            let back = RunConfig::parse(&c.to_toml()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
