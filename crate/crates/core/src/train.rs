//! Training objectives and the alternating VAE / discriminator update.

use crate::error::{Error, Result};
use crate::image::PixelSource;
use crate::model::{reparameterize, DisCoPatch, Network};
use crate::norm::{GroupLayout, StatsSource};
use crate::optim::AdamState;
use crate::patching::{sample_train_patches, PatchBatch};
use crate::real::Real;
use crate::rng::{normal_vec, rng_from_seed, DetRng};
use crate::tensor::{Tape, Tensor, Var};
use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

/// Weights of the KL term and of the two adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub rec: f64,
    pub gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kl: 1e-4,
            rec: 1e-3,
            gen: 1e-3,
        }
    }
}

/// Form of the generator's adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialForm {
    /// `1 − log D`.
    #[default]
    OneMinusLog,
    /// `−log D`.
    NonSaturating,
}

/// Objective minimized by the discriminator. Both drive real scores to 1 and
/// reconstructed and generated scores to 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiscObjective {
    /// Binary cross-entropy: `−log D_real − log(1 − D_rec) − log(1 − D_fake)`.
    #[default]
    CrossEntropy,
    /// `log(1 − D_real) + log D_rec + log D_fake`. Each term saturates when
    /// the discriminator is wrong, so a discriminator that drifts toward 0 on
    /// every input stops learning.
    LogOdds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Images per step; each contributes `patches_per_image` patches.
    pub batch_images: usize,
    pub patches_per_image: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Scores are clamped to `[prob_clamp, 1 − prob_clamp]` before logs.
    pub prob_clamp: f64,
    pub weights: LossWeights,
    pub adversarial_form: AdversarialForm,
    pub disc_objective: DiscObjective,
    /// Score real, reconstructed and generated patches in one discriminator
    /// pass with pooled statistics instead of three separate passes.
    pub shared_disc_forward: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 8.5e-5,
            batch_images: 16,
            patches_per_image: 48,
            epochs: 30,
            seed: 0,
            prob_clamp: 1e-4,
            weights: LossWeights::default(),
            adversarial_form: AdversarialForm::default(),
            disc_objective: DiscObjective::default(),
            shared_disc_forward: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("train_config", format!("lr {} must be non-negative", self.lr)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::param(
                "train_config",
                format!("prob_clamp {} outside (0, 0.5)", self.prob_clamp),
            ));
        }
        if self.batch_images == 0 || self.patches_per_image == 0 {
            return Err(Error::param("train_config", "batch_images and patches_per_image must be positive"));
        }
        let w = self.weights;
        if [w.kl, w.rec, w.gen].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("train_config", "loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Rejects scores that are NaN or outside `[0, 1]`.
pub fn check_scores<T: Real>(scores: &[T], what: &str) -> Result<()> {
    match scores.iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        Some(bad) => Err(Error::Contract(format!("{} score {} outside [0, 1]", what, bad))),
        None => Ok(()),
    }
}

fn clamped<T: Real>(tape: &mut Tape<T>, d: Var, eps: f64) -> Var {
    tape.clamp(d, T::from_f64_lossy(eps), T::from_f64_lossy(1.0 - eps))
}

fn mean_log<T: Real>(tape: &mut Tape<T>, d: Var, eps: f64) -> Result<Var> {
    let c = clamped(tape, d, eps);
    let l = tape.log(c);
    tape.mean(l)
}

fn mean_log_complement<T: Real>(tape: &mut Tape<T>, d: Var, eps: f64) -> Result<Var> {
    let c = clamped(tape, d, eps);
    let neg = tape.scale(c, -T::one());
    let one_minus = tape.shift(neg, T::one());
    let l = tape.log(one_minus);
    tape.mean(l)
}

/// Mean squared reconstruction error over all elements.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d);
    tape.mean(sq)
}

/// `−½ Σ_j (1 + logσ²_j − μ²_j − σ²_j)` averaged over the batch.
pub fn kl_loss<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.shape(mu).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("kl_loss"));
    }
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.sub(logvar, mu2)?;
    let b = tape.sub(a, var)?;
    let c = tape.shift(b, T::one());
    let s = tape.sum(c);
    Ok(tape.scale(s, T::from_f64_lossy(-0.5 / n as f64)))
}

/// Reconstruction plus `kl_weight`-scaled KL term; returns `(total, rec, kl)`.
pub fn loss_vae<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    mu: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<(Var, Var, Var)> {
    let rec = reconstruction_loss(tape, x, x_hat)?;
    let kl = kl_loss(tape, mu, logvar)?;
    let wkl = tape.scale(kl, T::from_f64_lossy(kl_weight));
    Ok((tape.add(rec, wkl)?, rec, kl))
}

/// `mean log(1 − D_real) + mean log D_rec + mean log D_fake`, minimized by
/// the discriminator.
pub fn loss_discriminator<T: Real>(tape: &mut Tape<T>, d_real: Var, d_rec: Var, d_fake: Var, eps: f64) -> Result<Var> {
    check_scores(tape.value(d_real), "real")?;
    check_scores(tape.value(d_rec), "reconstructed")?;
    check_scores(tape.value(d_fake), "generated")?;
    let real = mean_log_complement(tape, d_real, eps)?;
    let rec = mean_log(tape, d_rec, eps)?;
    let fake = mean_log(tape, d_fake, eps)?;
    let s = tape.add(real, rec)?;
    tape.add(s, fake)
}

/// `−mean log D_real − mean log(1 − D_rec) − mean log(1 − D_fake)`.
pub fn loss_discriminator_ce<T: Real>(tape: &mut Tape<T>, d_real: Var, d_rec: Var, d_fake: Var, eps: f64) -> Result<Var> {
    check_scores(tape.value(d_real), "real")?;
    check_scores(tape.value(d_rec), "reconstructed")?;
    check_scores(tape.value(d_fake), "generated")?;
    let real = mean_log(tape, d_real, eps)?;
    let rec = mean_log_complement(tape, d_rec, eps)?;
    let fake = mean_log_complement(tape, d_fake, eps)?;
    let s = tape.add(real, rec)?;
    let s = tape.add(s, fake)?;
    Ok(tape.scale(s, -T::one()))
}

pub fn discriminator_objective<T: Real>(
    tape: &mut Tape<T>,
    objective: DiscObjective,
    d_real: Var,
    d_rec: Var,
    d_fake: Var,
    eps: f64,
) -> Result<Var> {
    match objective {
        DiscObjective::CrossEntropy => loss_discriminator_ce(tape, d_real, d_rec, d_fake, eps),
        DiscObjective::LogOdds => loss_discriminator(tape, d_real, d_rec, d_fake, eps),
    }
}

/// One adversarial term for the generator: `mean(1 − log D)` or `mean(−log D)`.
pub fn adversarial_term<T: Real>(tape: &mut Tape<T>, d: Var, eps: f64, form: AdversarialForm) -> Result<Var> {
    check_scores(tape.value(d), "adversarial")?;
    let m = mean_log(tape, d, eps)?;
    let neg = tape.scale(m, -T::one());
    Ok(match form {
        AdversarialForm::OneMinusLog => tape.shift(neg, T::one()),
        AdversarialForm::NonSaturating => neg,
    })
}

/// Sum of the adversarial terms for reconstructed and generated patches.
pub fn loss_adversarial<T: Real>(tape: &mut Tape<T>, d_rec: Var, d_fake: Var, eps: f64, form: AdversarialForm) -> Result<Var> {
    let a = adversarial_term(tape, d_rec, eps, form)?;
    let b = adversarial_term(tape, d_fake, eps, form)?;
    tape.add(a, b)
}

/// Components of the VAE-side objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DcpParts<V> {
    pub total: V,
    pub rec: V,
    pub kl: V,
    pub adv_rec: V,
    pub adv_gen: V,
}

/// `rec + ω_KL·KL + ω_Rec·adv(D_rec) + ω_Gen·adv(D_fake)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_dcp<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    mu: Var,
    logvar: Var,
    d_rec: Var,
    d_fake: Var,
    weights: LossWeights,
    eps: f64,
    form: AdversarialForm,
) -> Result<DcpParts<Var>> {
    let (vae, rec, kl) = loss_vae(tape, x, x_hat, mu, logvar, weights.kl)?;
    let adv_rec = adversarial_term(tape, d_rec, eps, form)?;
    let adv_gen = adversarial_term(tape, d_fake, eps, form)?;
    let wr = tape.scale(adv_rec, T::from_f64_lossy(weights.rec));
    let wg = tape.scale(adv_gen, T::from_f64_lossy(weights.gen));
    let s = tape.add(vae, wr)?;
    let total = tape.add(s, wg)?;
    Ok(DcpParts {
        total,
        rec,
        kl,
        adv_rec,
        adv_gen,
    })
}

/// Losses and mean scores of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_dcp: f64,
    pub l_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub rec: f64,
    pub kl: f64,
}

/// Optimizer state for the VAE (encoder then generator) and discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<T = f32> {
    pub vae: AdamState<T>,
    pub disc: AdamState<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn for_model(model: &DisCoPatch<T>) -> Self {
        let vae_sizes = model
            .encoder
            .params()
            .into_iter()
            .chain(model.generator.params())
            .map(Tensor::numel)
            .collect::<Vec<_>>();
        Optimizers {
            vae: AdamState::new(vae_sizes),
            disc: AdamState::new(model.discriminator.params().into_iter().map(Tensor::numel)),
        }
    }
}

fn mean_of<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64
}

fn finite_or(step: u64, what: &str, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail = values
        .iter()
        .map(|(k, v)| format!("{}={}", k, v))
        .collect::<Vec<_>>()
        .join(", ");
    Err(Error::NonFinite {
        step,
        detail: format!("{}: {}", what, detail),
    })
}

/// Discriminator scores for real, reconstructed and generated patches,
/// either through three passes or one pooled pass.
#[allow(clippy::too_many_arguments)]
fn score_three<T: Real>(
    model: &DisCoPatch<T>,
    tape: &mut Tape<T>,
    bound: &crate::model::Bound,
    real: Option<Var>,
    rec: Var,
    fake: Var,
    shared: bool,
    stats: &mut Vec<Vec<crate::tensor::NormStats>>,
) -> Result<(Option<Var>, Var, Var)> {
    let cfg = &model.config;
    let d = &model.discriminator;
    let n = tape.shape(rec)[0];
    if shared {
        let parts: Vec<Var> = real.into_iter().chain([rec, fake]).collect();
        let all = tape.concat(&parts)?;
        let total = n * parts.len();
        let (s, st) = d.forward(tape, bound, cfg, all, StatsSource::Batch(GroupLayout::single(total)?))?;
        stats.push(st);
        let mut at = 0;
        let real_s = match real {
            Some(_) => {
                at = n;
                Some(tape.slice(s, 0, n)?)
            }
            None => None,
        };
        let rec_s = tape.slice(s, at, n)?;
        let fake_s = tape.slice(s, at + n, n)?;
        return Ok((real_s, rec_s, fake_s));
    }
    let single = StatsSource::Batch(GroupLayout::single(n)?);
    let mut run = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let (s, st) = d.forward(tape, bound, cfg, x, single)?;
        stats.push(st);
        Ok(s)
    };
    let real_s = match real {
        Some(r) => Some(run(tape, r)?),
        None => None,
    };
    let rec_s = run(tape, rec)?;
    let fake_s = run(tape, fake)?;
    Ok((real_s, rec_s, fake_s))
}

/// Outcome of the VAE half of a step: the loss parts and the reconstructed
/// and generated patches, which the discriminator half consumes.
#[derive(Clone, Debug)]
pub struct VaeUpdate<T = f32> {
    pub parts: DcpParts<f64>,
    pub reconstructed: Tensor<T>,
    pub generated: Tensor<T>,
}

/// Adam step on the encoder and generator through a frozen discriminator,
/// followed by their running-statistics update. Discriminator state is not
/// touched.
pub fn vae_update<T: Real>(
    model: &mut DisCoPatch<T>,
    opt: &mut AdamState<T>,
    batch: &PatchBatch<T>,
    cfg: &TrainConfig,
    rng: &mut DetRng,
    step: u64,
) -> Result<VaeUpdate<T>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("train_step"));
    }
    let latent = model.config.latent_dim;
    let mut tape = Tape::new();
    let eb = model.encoder.bind(&mut tape, true);
    let gb = model.generator.bind(&mut tape, true);
    let db = model.discriminator.bind(&mut tape, false);
    let x = tape.constant(batch.data.shape(), batch.data.data().to_vec())?;
    let (mu, logvar, enc_stats) = model.encoder.forward(&mut tape, &eb, &model.config, x)?;
    let noise = tape.constant(&[n, latent], normal_vec(rng, n * latent))?;
    let z = reparameterize(&mut tape, mu, logvar, noise)?;
    let (x_rec, rec_stats) = model.generator.forward(&mut tape, &gb, &model.config, z)?;
    let z_fake = tape.constant(&[n, latent], normal_vec(rng, n * latent))?;
    let (x_fake, fake_stats) = model.generator.forward(&mut tape, &gb, &model.config, z_fake)?;
    let mut unused = Vec::new();
    let real_for_shared = if cfg.shared_disc_forward { Some(x) } else { None };
    let (_, d_rec, d_fake) = score_three(model, &mut tape, &db, real_for_shared, x_rec, x_fake, cfg.shared_disc_forward, &mut unused)?;
    let parts = loss_dcp(&mut tape, x, x_rec, mu, logvar, d_rec, d_fake, cfg.weights, cfg.prob_clamp, cfg.adversarial_form)?;
    let values = DcpParts {
        total: tape.scalar(parts.total).as_f64(),
        rec: tape.scalar(parts.rec).as_f64(),
        kl: tape.scalar(parts.kl).as_f64(),
        adv_rec: tape.scalar(parts.adv_rec).as_f64(),
        adv_gen: tape.scalar(parts.adv_gen).as_f64(),
    };
    finite_or(
        step,
        "vae loss",
        &[
            ("l_dcp", values.total),
            ("rec", values.rec),
            ("kl", values.kl),
            ("adv_rec", values.adv_rec),
            ("adv_gen", values.adv_gen),
        ],
    )?;
    tape.backward(parts.total)?;
    let mut grads = model.encoder.grads(&tape, &eb);
    grads.extend(model.generator.grads(&tape, &gb));
    let reconstructed = tape.to_tensor(x_rec);
    let generated = tape.to_tensor(x_fake);
    drop(tape);
    {
        let mut params: Vec<&mut [T]> = model
            .encoder
            .params_mut()
            .into_iter()
            .chain(model.generator.params_mut())
            .map(|t| t.data_mut())
            .collect();
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| &g[..]).collect();
        opt.step_slices(&mut params, &grad_refs, cfg.lr)?;
    }
    model.encoder.absorb_stats(&enc_stats)?;
    model.generator.absorb_stats(&rec_stats)?;
    model.generator.absorb_stats(&fake_stats)?;
    Ok(VaeUpdate {
        parts: values,
        reconstructed,
        generated,
    })
}

/// Losses and mean scores of the discriminator half of a step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscUpdate {
    pub l_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

/// Adam step on the discriminator with real, reconstructed and generated
/// patches as constants, followed by its running-statistics update. Encoder
/// and generator state is not touched.
pub fn disc_update<T: Real>(
    model: &mut DisCoPatch<T>,
    opt: &mut AdamState<T>,
    real: &Tensor<T>,
    reconstructed: &Tensor<T>,
    generated: &Tensor<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<DiscUpdate> {
    let mut tape = Tape::new();
    let db = model.discriminator.bind(&mut tape, true);
    let xr = tape.constant(real.shape(), real.data().to_vec())?;
    let xh = tape.constant(reconstructed.shape(), reconstructed.data().to_vec())?;
    let xf = tape.constant(generated.shape(), generated.data().to_vec())?;
    let mut disc_stats = Vec::new();
    let (d_real, d_rec, d_fake) = score_three(model, &mut tape, &db, Some(xr), xh, xf, cfg.shared_disc_forward, &mut disc_stats)?;
    let d_real = d_real.expect("real scores requested");
    let l_d = discriminator_objective(&mut tape, cfg.disc_objective, d_real, d_rec, d_fake, cfg.prob_clamp)?;
    let report = DiscUpdate {
        l_d: tape.scalar(l_d).as_f64(),
        d_real: mean_of(tape.value(d_real)),
        d_fake: mean_of(tape.value(d_fake)),
    };
    finite_or(step, "discriminator loss", &[("l_d", report.l_d)])?;
    tape.backward(l_d)?;
    let grads = model.discriminator.grads(&tape, &db);
    drop(tape);
    {
        let mut params: Vec<&mut [T]> = model.discriminator.params_mut().into_iter().map(|t| t.data_mut()).collect();
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| &g[..]).collect();
        opt.step_slices(&mut params, &grad_refs, cfg.lr)?;
    }
    for st in &disc_stats {
        model.discriminator.absorb_stats(st)?;
    }
    Ok(report)
}

/// One alternating update: VAE step through a frozen discriminator, then a
/// discriminator step on detached copies of the three patch sets.
pub fn train_step<T: Real>(
    model: &mut DisCoPatch<T>,
    opt: &mut Optimizers<T>,
    batch: &PatchBatch<T>,
    cfg: &TrainConfig,
    rng: &mut DetRng,
    step: u64,
) -> Result<StepReport> {
    let vae = vae_update(model, &mut opt.vae, batch, cfg, rng, step)?;
    let disc = disc_update(model, &mut opt.disc, &batch.data, &vae.reconstructed, &vae.generated, cfg, step)?;
    Ok(StepReport {
        step,
        l_dcp: vae.parts.total,
        l_d: disc.l_d,
        d_real: disc.d_real,
        d_fake: disc.d_fake,
        rec: vae.parts.rec,
        kl: vae.parts.kl,
    })
}

/// Mean of the step reports of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    pub l_dcp: f64,
    pub l_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

/// Model, optimizers and the sampling stream of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real = f32> {
    pub model: DisCoPatch<T>,
    pub opt: Optimizers<T>,
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    rng: DetRng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: DisCoPatch<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Optimizers::for_model(&model);
        let rng = rng_from_seed(config.seed);
        Ok(Trainer {
            model,
            opt,
            config,
            step: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn train_batch(&mut self, batch: &PatchBatch<T>) -> Result<StepReport> {
        let r = train_step(&mut self.model, &mut self.opt, batch, &self.config, &mut self.rng, self.step)?;
        self.step += 1;
        Ok(r)
    }

    /// One pass over the shuffled images, with fresh random patches.
    pub fn run_epoch<S: PixelSource>(&mut self, images: &[S]) -> Result<(EpochReport, Vec<StepReport>)> {
        if images.is_empty() {
            return Err(Error::Empty("run_epoch"));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.rng);
        let p = self.model.config.patch_size;
        let mut steps = Vec::new();
        for chunk in order.chunks(self.config.batch_images) {
            let imgs: Vec<&S> = chunk.iter().map(|&i| &images[i]).collect();
            let batch = sample_train_patches(&imgs, self.config.patches_per_image, p, &mut self.rng)?;
            steps.push(self.train_batch(&batch)?);
        }
        let k = steps.len() as f64;
        let avg = |f: fn(&StepReport) -> f64| steps.iter().map(f).sum::<f64>() / k;
        let report = EpochReport {
            epoch: self.epoch,
            step: self.step,
            l_dcp: avg(|s| s.l_dcp),
            l_d: avg(|s| s.l_d),
            d_real: avg(|s| s.d_real),
            d_fake: avg(|s| s.d_fake),
        };
        self.epoch += 1;
        Ok((report, steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::model::ModelConfig;

    fn scalar_loss(build: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = build(&mut tape);
        tape.scalar(v)
    }

    fn consts(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn vae_loss_examples() {
        let l = scalar_loss(|t| {
            let x = consts(t, &[0.3, -0.2]);
            let mu = consts(t, &[0.0, 0.0]);
            let lv = consts(t, &[0.0, 0.0]);
            loss_vae(t, x, x, mu, lv, 1e-4).unwrap().0
        });
        assert_eq!(l, 0.0);
        let kl = scalar_loss(|t| {
            let mu = t.constant(&[1, 1], vec![1.0]).unwrap();
            let lv = t.constant(&[1, 1], vec![0.0]).unwrap();
            kl_loss(t, mu, lv).unwrap()
        });
        assert!((kl - 0.5).abs() < 1e-15);
        let rec = scalar_loss(|t| {
            let x = consts(t, &[0.1, 0.5, -0.3]);
            let xh = consts(t, &[0.2, 0.6, -0.2]);
            reconstruction_loss(t, x, xh).unwrap()
        });
        assert!((rec - 0.01).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_examples() {
        let e = 1e-4;
        let opt = scalar_loss(|t| {
            let r = consts(t, &[1.0 - e]);
            let h = consts(t, &[e]);
            let f = consts(t, &[e]);
            loss_discriminator(t, r, h, f, e).unwrap()
        });
        assert!((opt - 3.0 * libm::log(1e-4)).abs() < 1e-9);
        assert!((opt + 27.631).abs() < 1e-3);
        let half = scalar_loss(|t| {
            let r = consts(t, &[0.5]);
            loss_discriminator(t, r, r, r, e).unwrap()
        });
        assert!((half - 3.0 * libm::log(0.5)).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for d in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let l = scalar_loss(|t| {
                let r = consts(t, &[d]);
                let h = consts(t, &[0.4]);
                loss_discriminator(t, r, h, h, e).unwrap()
            });
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let e = 1e-4;
        let ce = |r: f64, h: f64, f: f64| {
            scalar_loss(|t| {
                let (r, h, f) = (consts(t, &[r]), consts(t, &[h]), consts(t, &[f]));
                loss_discriminator_ce(t, r, h, f, e).unwrap()
            })
        };
        assert!((ce(0.5, 0.5, 0.5) - 3.0 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce(1.0, 0.0, 0.0) + 3.0 * libm::log(1.0 - e)).abs() < 1e-12);
        // A wrong discriminator is penalized up to the clamp, not flattened.
        assert!((ce(0.0, 0.5, 0.5) - (-libm::log(e) + 2.0 * core::f64::consts::LN_2)).abs() < 1e-9);
        let mut t = Tape::<f64>::new();
        let r = t.variable(&[1, 1], vec![0.01]).unwrap();
        let h = consts(&mut t, &[0.5]);
        let l = loss_discriminator_ce(&mut t, r, h, h, e).unwrap();
        t.backward(l).unwrap();
        assert!((t.grad(r).unwrap()[0] + 100.0).abs() < 1e-9);
    }

    #[test]
    fn scores_outside_unit_interval_are_rejected() {
        let mut t = Tape::<f64>::new();
        let ok = consts(&mut t, &[0.5]);
        let bad = consts(&mut t, &[1.5]);
        let nan = consts(&mut t, &[f64::NAN]);
        assert!(matches!(loss_discriminator(&mut t, bad, ok, ok, 1e-4), Err(Error::Contract(_))));
        assert!(matches!(loss_adversarial(&mut t, ok, nan, 1e-4, AdversarialForm::OneMinusLog), Err(Error::Contract(_))));
    }

    #[test]
    fn adversarial_loss_examples() {
        let near_one = scalar_loss(|t| {
            let d = consts(t, &[1.0 - 1e-12]);
            loss_adversarial(t, d, d, 1e-12, AdversarialForm::OneMinusLog).unwrap()
        });
        assert!((near_one - 2.0).abs() < 1e-9);
        let half = scalar_loss(|t| {
            let d = consts(t, &[0.5]);
            loss_adversarial(t, d, d, 1e-4, AdversarialForm::OneMinusLog).unwrap()
        });
        assert!((half - 2.0 * (1.0 - libm::log(0.5))).abs() < 1e-12);
        assert!((half - 3.386).abs() < 1e-3);
        let mut t = Tape::<f64>::new();
        let d = t.variable(&[2, 1], vec![0.25, 0.8]).unwrap();
        let l = adversarial_term(&mut t, d, 1e-4, AdversarialForm::OneMinusLog).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(d).unwrap();
        assert!((g[0] + 1.0 / (2.0 * 0.25)).abs() < 1e-12);
        assert!((g[1] + 1.0 / (2.0 * 0.8)).abs() < 1e-12);
    }

    fn dcp_with(weights: LossWeights) -> DcpParts<f64> {
        let mut t = Tape::<f64>::new();
        let x = t.constant(&[2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let xh = t.constant(&[2, 3], vec![0.0, 0.25, 0.3, -0.3, 0.4, -0.5]).unwrap();
        let mu = t.constant(&[2, 2], vec![0.5, -0.2, 0.1, 0.3]).unwrap();
        let lv = t.constant(&[2, 2], vec![0.1, -0.3, 0.2, 0.0]).unwrap();
        let dr = t.constant(&[2, 1], vec![0.3, 0.6]).unwrap();
        let df = t.constant(&[2, 1], vec![0.2, 0.45]).unwrap();
        let p = loss_dcp(&mut t, x, xh, mu, lv, dr, df, weights, 1e-4, AdversarialForm::OneMinusLog).unwrap();
        DcpParts {
            total: t.scalar(p.total),
            rec: t.scalar(p.rec),
            kl: t.scalar(p.kl),
            adv_rec: t.scalar(p.adv_rec),
            adv_gen: t.scalar(p.adv_gen),
        }
    }

    #[test]
    fn dcp_is_the_weighted_sum_of_its_parts() {
        let w = LossWeights::default();
        let p = dcp_with(w);
        let want = p.rec + w.kl * p.kl + w.rec * p.adv_rec + w.gen * p.adv_gen;
        assert!((p.total - want).abs() < 1e-12);
        assert!((0.01 + 1e-4 * 0.5 + 1e-3 + 1e-3 - 0.01205f64).abs() < 1e-15);
        let only_rec = dcp_with(LossWeights { kl: 0.0, rec: 0.0, gen: 0.0 });
        assert_eq!(only_rec.total, only_rec.rec);
        let doubled = dcp_with(LossWeights { kl: 2.0 * w.kl, ..w });
        assert!((doubled.total - p.total - w.kl * p.kl).abs() < 1e-12);
    }

    fn tiny_images() -> Vec<Image> {
        (0..2)
            .map(|k| Image::from_fn(12, 12, |x, y, c| ((x * (k + 2) + y * 3 + c * 5) % 11) as f32 / 10.0))
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let model = DisCoPatch::<f32>::new(ModelConfig::micro(), 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_images: 2,
            patches_per_image: 2,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(model.clone(), cfg).unwrap();
        tr.run_epoch(&tiny_images()).unwrap();
        let params = |m: &DisCoPatch<f32>| -> Vec<Vec<u32>> {
            m.encoder
                .params()
                .into_iter()
                .chain(m.generator.params())
                .chain(m.discriminator.params())
                .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
                .collect()
        };
        assert_eq!(params(&tr.model), params(&model));
    }

    #[test]
    fn step_count_follows_batching() {
        let images: Vec<Image> = (0..4).map(|_| tiny_images().remove(0)).collect();
        let cfg = TrainConfig {
            batch_images: 2,
            patches_per_image: 8,
            lr: 1e-4,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(DisCoPatch::<f32>::new(ModelConfig::micro(), 0).unwrap(), cfg).unwrap();
        let (report, steps) = tr.run_epoch(&images).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(report.step, 2);
    }

    #[test]
    fn shared_forward_variant_runs() {
        let cfg = TrainConfig {
            batch_images: 2,
            patches_per_image: 2,
            shared_disc_forward: true,
            adversarial_form: AdversarialForm::NonSaturating,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(DisCoPatch::<f32>::new(ModelConfig::micro(), 0).unwrap(), cfg).unwrap();
        let (r, _) = tr.run_epoch(&tiny_images()).unwrap();
        assert!(r.l_dcp.is_finite() && r.l_d.is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { prob_clamp: 0.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    }
}
