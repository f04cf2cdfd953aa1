//! Encoder, generator and discriminator networks.
//!
//! The encoder is a stack of stride-2 conv + norm + LeakyReLU stages followed
//! by two linear heads (mean and log-variance). The generator mirrors it with
//! transposed convolutions and ends in a 3×3 conv + tanh. The discriminator
//! reuses the encoder trunk with a single linear head and a sigmoid.

use crate::error::{Error, Result};
use crate::norm::{norm_layer, pool_group_stats, GroupLayout, NormMode, NormState, StatsSource};
pub use crate::norm::NormKind;
use crate::real::Real;
use crate::rng::rng_from_seed;
use crate::tensor::{Activation, ConvGeom, ConvTransposeGeom, NormStats, Tape, Tensor, Var};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub patch_size: usize,
    pub in_channels: usize,
    pub leaky_slope: f64,
    /// Normalization used in the discriminator trunk.
    pub norm_kind: NormKind,
    /// Momentum of the running statistics (encoder and generator, and the
    /// discriminator when it tracks them).
    pub momentum: f64,
    pub eps: f64,
    /// Whether the discriminator keeps running statistics.
    pub disc_track_running_stats: bool,
    /// Whether discriminator gradients flow through its batch statistics.
    pub disc_stats_grad: bool,
}

impl ModelConfig {
    /// The small patch model used for desk-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            latent_dim: 128,
            hidden_dims: vec![32, 64, 128],
            patch_size: 32,
            in_channels: 3,
            leaky_slope: 0.01,
            norm_kind: NormKind::Patch,
            momentum: 0.1,
            eps: 1e-5,
            disc_track_running_stats: false,
            disc_stats_grad: true,
        }
    }

    /// Whole-image variant of [`ModelConfig::desk`] whose discriminator
    /// keeps running statistics, for comparing learned and batch statistics.
    pub fn desk_full_image() -> Self {
        ModelConfig {
            norm_kind: NormKind::Batch,
            disc_track_running_stats: true,
            ..Self::desk()
        }
    }

    /// 64×64 patches, latent 1024, hidden 128/256/512/1024.
    pub fn paper_patches() -> Self {
        ModelConfig {
            latent_dim: 1024,
            hidden_dims: vec![128, 256, 512, 1024],
            patch_size: 64,
            ..Self::desk()
        }
    }

    /// 256×256 whole images, latent 1024, hidden 32..1024.
    pub fn full_size() -> Self {
        ModelConfig {
            latent_dim: 1024,
            hidden_dims: vec![32, 64, 128, 256, 512, 1024],
            patch_size: 256,
            ..Self::desk()
        }
    }

    /// Tiny model for gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            latent_dim: 16,
            hidden_dims: vec![4, 8],
            patch_size: 8,
            ..Self::desk()
        }
    }

    pub fn stages(&self) -> usize {
        self.hidden_dims.len()
    }

    /// Spatial size at the bottom of the encoder.
    pub fn bottom_size(&self) -> usize {
        self.patch_size >> self.stages()
    }

    /// Width of the flattened encoder/discriminator trunk output.
    pub fn flat_width(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(0) * self.bottom_size() * self.bottom_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::param("model_config", d));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad(format!("hidden_dims {:?} must be non-empty and positive", self.hidden_dims));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if self.stages() >= usize::BITS as usize || self.patch_size % (1 << self.stages()) != 0 || self.bottom_size() == 0 {
            return bad(format!(
                "patch_size {} is not divisible by 2^{}",
                self.patch_size,
                self.stages()
            ));
        }
        if let NormKind::Group(g) = self.norm_kind {
            if g == 0 || self.hidden_dims.iter().any(|&h| h % g != 0) {
                return bad(format!("hidden_dims {:?} do not split into {} groups", self.hidden_dims, g));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.disc_track_running_stats && !self.norm_kind.is_batch_like() {
            return bad("running statistics only apply to batch-like discriminator norms".into());
        }
        Ok(())
    }
}

/// Parameter tensors of a network in a fixed order, with names for
/// serialization.
pub trait Network<T: Real> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn param_names(&self) -> Vec<String>;
    fn norms(&self) -> Vec<&NormState<T>>;
    fn norms_mut(&mut self) -> Vec<&mut NormState<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Puts every parameter on `tape`, trainable or as constants.
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params()
            .into_iter()
            .map(|t| {
                let data = t.data().to_vec();
                let v = if trainable {
                    tape.variable(t.shape(), data)
                } else {
                    tape.constant(t.shape(), data)
                };
                v.expect("tensor shape is consistent")
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of the bound parameters (zeros where none reached them).
    fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params()
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| tape.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }

    fn set_mode(&mut self, mode: NormMode) {
        for n in self.norms_mut() {
            n.mode = mode;
        }
    }

    /// Feeds forward-pass statistics (one entry per norm layer, in order)
    /// into the running averages of layers that track them.
    fn absorb_stats(&mut self, stats: &[NormStats]) -> Result<()> {
        let norms = self.norms_mut();
        if stats.len() != norms.len() {
            return Err(Error::shape(
                "absorb_stats",
                format!("{} statistics for {} norm layers", stats.len(), norms.len()),
            ));
        }
        for (n, s) in norms.into_iter().zip(stats) {
            if n.updates_running() {
                let (mean, var) = pool_group_stats(s, n.channels());
                n.update_running(&mean, &var)?;
            }
        }
        Ok(())
    }

    /// Parameters and running statistics by name.
    fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(n, t)| (n, Tensor::new(t.shape(), t.data().to_vec()).expect("consistent")))
            .collect();
        for (i, n) in self.norms().into_iter().enumerate() {
            let c = n.channels();
            out.push((format!("norm{}.running_mean", i), Tensor::new(&[c], n.running_mean.clone()).expect("consistent")));
            out.push((format!("norm{}.running_var", i), Tensor::new(&[c], n.running_var.clone()).expect("consistent")));
        }
        out
    }

    /// Inverse of [`Network::state_tensors`]; every entry must be present
    /// with a matching shape.
    fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        let names = self.param_names();
        for (name, t) in names.iter().zip(self.params_mut()) {
            let src = lookup(name).ok_or_else(|| Error::Contract(format!("missing tensor {}", name)))?;
            if src.shape() != t.shape() {
                return Err(Error::shape(
                    "load_state",
                    format!("{}: stored {:?}, model {:?}", name, src.shape(), t.shape()),
                ));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        for (i, n) in self.norms_mut().into_iter().enumerate() {
            for (suffix, dst) in [("running_mean", &mut n.running_mean), ("running_var", &mut n.running_var)] {
                let name = format!("norm{}.{}", i, suffix);
                let src = lookup(&name).ok_or_else(|| Error::Contract(format!("missing tensor {}", name)))?;
                if src.numel() != dst.len() {
                    return Err(Error::shape("load_state", format!("{}: {} values, model {}", name, src.numel(), dst.len())));
                }
                dst.copy_from_slice(src.data());
            }
        }
        Ok(())
    }
}

/// Tape handles of a network's parameters, in [`Network::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T = f32> {
    /// `out × in × k × k`, or `in × out × k × k` when transposed.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Conv (or transposed conv) followed by a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T = f32> {
    pub conv: Conv<T>,
    pub norm: NormState<T>,
}

fn kaiming<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * libm::sqrt(3.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound))).with_grad()
}

fn zeros_param<T: Real>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[n]).with_grad()
}

fn leaky_gain(slope: f64) -> f64 {
    libm::sqrt(2.0 / (1.0 + slope * slope))
}

impl<T: Real> Linear<T> {
    fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize, gain: f64) -> Self {
        Linear {
            weight: kaiming(rng, &[outputs, inputs], inputs, gain),
            bias: zeros_param(outputs),
        }
    }
}

impl<T: Real> Stage<T> {
    fn conv<R: Rng>(rng: &mut R, cin: usize, cout: usize, gain: f64, momentum: f64, track: bool, eps: f64) -> Self {
        let mut norm = NormState::new(cout, momentum, track);
        norm.eps = eps;
        Stage {
            conv: Conv {
                weight: kaiming(rng, &[cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL, gain),
                bias: zeros_param(cout),
            },
            norm,
        }
    }

    fn transposed<R: Rng>(rng: &mut R, cin: usize, cout: usize, gain: f64, momentum: f64, eps: f64) -> Self {
        let mut norm = NormState::new(cout, momentum, true);
        norm.eps = eps;
        Stage {
            conv: Conv {
                weight: kaiming(rng, &[cin, cout, KERNEL, KERNEL], cin * KERNEL * KERNEL, gain),
                bias: zeros_param(cout),
            },
            norm,
        }
    }

    fn push_params<'a>(&'a self, out: &mut Vec<&'a Tensor<T>>) {
        out.extend([&self.conv.weight, &self.conv.bias, &self.norm.gamma, &self.norm.beta]);
    }

    fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.conv.weight);
        out.push(&mut self.conv.bias);
        out.push(&mut self.norm.gamma);
        out.push(&mut self.norm.beta);
    }
}

fn stage_names(prefix: &str, i: usize) -> [String; 4] {
    [
        format!("{}{}.weight", prefix, i),
        format!("{}{}.bias", prefix, i),
        format!("{}{}.gamma", prefix, i),
        format!("{}{}.beta", prefix, i),
    ]
}

/// Pulls bound parameter handles in order.
struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(bound: &'a Bound) -> Self {
        Cursor { vars: &bound.vars, at: 0 }
    }

    fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.at)
            .copied()
            .ok_or_else(|| Error::Contract("bound parameters exhausted".into()))?;
        self.at += 1;
        Ok(v)
    }

    fn stage(&mut self) -> Result<[Var; 4]> {
        Ok([self.next()?, self.next()?, self.next()?, self.next()?])
    }
}

fn stride2() -> ConvGeom {
    ConvGeom { stride: 2, padding: 1 }
}

fn up2() -> ConvTransposeGeom {
    ConvTransposeGeom {
        stride: 2,
        padding: 1,
        output_padding: 1,
    }
}

fn check_input<T: Real>(tape: &Tape<T>, x: Var, cfg: &ModelConfig, op: &'static str) -> Result<usize> {
    match *tape.shape(x) {
        [n, c, h, w] if c == cfg.in_channels && h == cfg.patch_size && w == cfg.patch_size => Ok(n),
        ref s => Err(Error::shape(
            op,
            format!(
                "expected N×{}×{}×{}, got {:?}",
                cfg.in_channels, cfg.patch_size, cfg.patch_size, s
            ),
        )),
    }
}

/// Statistics source of an encoder/generator layer: batch statistics in
/// train mode, running statistics in eval mode.
fn vae_source<T: Real>(state: &NormState<T>, n: usize) -> Result<StatsSource> {
    Ok(if state.uses_running() {
        StatsSource::Running
    } else {
        StatsSource::Batch(GroupLayout::single(n)?)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T = f32> {
    pub stages: Vec<Stage<T>>,
    pub mu_head: Linear<T>,
    pub logvar_head: Linear<T>,
}

impl<T: Real> Encoder<T> {
    fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let g = leaky_gain(cfg.leaky_slope);
        let mut cin = cfg.in_channels;
        let stages = cfg
            .hidden_dims
            .iter()
            .map(|&h| {
                let s = Stage::conv(rng, cin, h, g, cfg.momentum, true, cfg.eps);
                cin = h;
                s
            })
            .collect();
        Encoder {
            stages,
            mu_head: Linear::init(rng, cfg.flat_width(), cfg.latent_dim, 1.0),
            logvar_head: Linear::init(rng, cfg.flat_width(), cfg.latent_dim, 1.0),
        }
    }

    /// Returns `(mean, log-variance, norm statistics)`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cfg: &ModelConfig,
        x: Var,
    ) -> Result<(Var, Var, Vec<NormStats>)> {
        let n = check_input(tape, x, cfg, "encode")?;
        let mut cur = Cursor::new(bound);
        let mut h = x;
        let mut stats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let [w, b, g, bt] = cur.stage()?;
            h = tape.conv2d(h, w, Some(b), stride2())?;
            let (y, s) = norm_layer(tape, h, g, bt, &st.norm, NormKind::Batch, vae_source(&st.norm, n)?, true)?;
            stats.extend(s);
            h = tape.activation(y, Activation::LeakyRelu(cfg.leaky_slope));
        }
        let flat = tape.reshape(h, &[n, cfg.flat_width()])?;
        let (mw, mb, lw, lb) = (cur.next()?, cur.next()?, cur.next()?, cur.next()?);
        let mu = tape.linear(flat, mw, Some(mb))?;
        let logvar = tape.linear(flat, lw, Some(lb))?;
        Ok((mu, logvar, stats))
    }
}

impl<T: Real> Network<T> for Encoder<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.stages.iter().for_each(|s| s.push_params(&mut out));
        out.extend([&self.mu_head.weight, &self.mu_head.bias, &self.logvar_head.weight, &self.logvar_head.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.stages.iter_mut().for_each(|s| s.push_params_mut(&mut out));
        out.push(&mut self.mu_head.weight);
        out.push(&mut self.mu_head.bias);
        out.push(&mut self.logvar_head.weight);
        out.push(&mut self.logvar_head.bias);
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.stages.len()).flat_map(|i| stage_names("conv", i)).collect();
        out.extend(["mu.weight", "mu.bias", "logvar.weight", "logvar.bias"].map(String::from));
        out
    }

    fn norms(&self) -> Vec<&NormState<T>> {
        self.stages.iter().map(|s| &s.norm).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut NormState<T>> {
        self.stages.iter_mut().map(|s| &mut s.norm).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f32> {
    pub project: Linear<T>,
    /// Upsampling stages over the reversed hidden dims, the last one keeping
    /// the channel count.
    pub stages: Vec<Stage<T>>,
    pub out_conv: Conv<T>,
}

impl<T: Real> Generator<T> {
    fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let g = leaky_gain(cfg.leaky_slope);
        let rev: Vec<usize> = cfg.hidden_dims.iter().rev().copied().collect();
        let mut stages: Vec<Stage<T>> = rev
            .windows(2)
            .map(|p| Stage::transposed(rng, p[0], p[1], g, cfg.momentum, cfg.eps))
            .collect();
        let first = rev[rev.len() - 1];
        stages.push(Stage::transposed(rng, first, first, g, cfg.momentum, cfg.eps));
        Generator {
            project: Linear::init(rng, cfg.latent_dim, cfg.flat_width(), 1.0),
            stages,
            out_conv: Conv {
                weight: kaiming(rng, &[cfg.in_channels, first, KERNEL, KERNEL], first * KERNEL * KERNEL, 1.0),
                bias: zeros_param(cfg.in_channels),
            },
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cfg: &ModelConfig,
        z: Var,
    ) -> Result<(Var, Vec<NormStats>)> {
        let n = match *tape.shape(z) {
            [n, l] if l == cfg.latent_dim => n,
            ref s => {
                return Err(Error::shape(
                    "generate",
                    format!("latent must be N×{}, got {:?}", cfg.latent_dim, s),
                ))
            }
        };
        let mut cur = Cursor::new(bound);
        let (pw, pb) = (cur.next()?, cur.next()?);
        let h = tape.linear(z, pw, Some(pb))?;
        let s = cfg.bottom_size();
        let top = *cfg.hidden_dims.last().expect("validated");
        let mut h = tape.reshape(h, &[n, top, s, s])?;
        let mut stats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let [w, b, g, bt] = cur.stage()?;
            h = tape.conv_transpose2d(h, w, Some(b), up2())?;
            let (y, s) = norm_layer(tape, h, g, bt, &st.norm, NormKind::Batch, vae_source(&st.norm, n)?, true)?;
            stats.extend(s);
            h = tape.activation(y, Activation::LeakyRelu(cfg.leaky_slope));
        }
        let (ow, ob) = (cur.next()?, cur.next()?);
        let out = tape.conv2d(h, ow, Some(ob), ConvGeom { stride: 1, padding: 1 })?;
        Ok((tape.activation(out, Activation::Tanh), stats))
    }
}

impl<T: Real> Network<T> for Generator<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.project.weight, &self.project.bias];
        self.stages.iter().for_each(|s| s.push_params(&mut out));
        out.extend([&self.out_conv.weight, &self.out_conv.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.project.weight, &mut self.project.bias];
        self.stages.iter_mut().for_each(|s| s.push_params_mut(&mut out));
        out.push(&mut self.out_conv.weight);
        out.push(&mut self.out_conv.bias);
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = vec![String::from("project.weight"), String::from("project.bias")];
        out.extend((0..self.stages.len()).flat_map(|i| stage_names("up", i)));
        out.extend(["out.weight", "out.bias"].map(String::from));
        out
    }

    fn norms(&self) -> Vec<&NormState<T>> {
        self.stages.iter().map(|s| &s.norm).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut NormState<T>> {
        self.stages.iter_mut().map(|s| &mut s.norm).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T = f32> {
    pub stages: Vec<Stage<T>>,
    pub head: Linear<T>,
    pub norm_kind: NormKind,
    pub stats_grad: bool,
}

impl<T: Real> Discriminator<T> {
    fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let g = leaky_gain(cfg.leaky_slope);
        let mut cin = cfg.in_channels;
        let stages = cfg
            .hidden_dims
            .iter()
            .map(|&h| {
                let s = Stage::conv(rng, cin, h, g, cfg.momentum, cfg.disc_track_running_stats, cfg.eps);
                cin = h;
                s
            })
            .collect();
        Discriminator {
            stages,
            head: Linear::init(rng, cfg.flat_width(), 1, 1.0),
            norm_kind: cfg.norm_kind,
            stats_grad: cfg.disc_stats_grad,
        }
    }

    /// Flattened trunk activations (`N × flat_width`).
    pub fn features(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cfg: &ModelConfig,
        x: Var,
        source: StatsSource,
    ) -> Result<(Var, Vec<NormStats>)> {
        let n = check_input(tape, x, cfg, "discriminate")?;
        if let StatsSource::Batch(layout) = source {
            layout.check(n, "discriminate")?;
        }
        let mut cur = Cursor::new(bound);
        let mut h = x;
        let mut stats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let [w, b, g, bt] = cur.stage()?;
            h = tape.conv2d(h, w, Some(b), stride2())?;
            let (y, s) = norm_layer(tape, h, g, bt, &st.norm, self.norm_kind, source, self.stats_grad)?;
            stats.extend(s);
            h = tape.activation(y, Activation::LeakyRelu(cfg.leaky_slope));
        }
        Ok((tape.reshape(h, &[n, cfg.flat_width()])?, stats))
    }

    /// Realness probabilities, `N × 1`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cfg: &ModelConfig,
        x: Var,
        source: StatsSource,
    ) -> Result<(Var, Vec<NormStats>)> {
        let (flat, stats) = self.features(tape, bound, cfg, x, source)?;
        let at = bound.vars.len() - 2;
        let logit = tape.linear(flat, bound.vars[at], Some(bound.vars[at + 1]))?;
        Ok((tape.activation(logit, Activation::Sigmoid), stats))
    }
}

impl<T: Real> Network<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.stages.iter().for_each(|s| s.push_params(&mut out));
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.stages.iter_mut().for_each(|s| s.push_params_mut(&mut out));
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.stages.len()).flat_map(|i| stage_names("conv", i)).collect();
        out.extend(["head.weight", "head.bias"].map(String::from));
        out
    }

    fn norms(&self) -> Vec<&NormState<T>> {
        self.stages.iter().map(|s| &s.norm).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut NormState<T>> {
        self.stages.iter_mut().map(|s| &mut s.norm).collect()
    }
}

/// `z = μ + ε·exp(½·logσ²)`.
pub fn reparameterize<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, T::from_f64_lossy(0.5));
    let sigma = tape.exp(half);
    let noise = tape.mul(eps, sigma)?;
    tape.add(mu, noise)
}

/// The three networks and their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DisCoPatch<T = f32> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Real> DisCoPatch<T> {
    /// Kaiming-uniform weights (gain for LeakyReLU where one follows), zero
    /// biases, `γ = 1`, `β = 0`, drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let encoder = Encoder::init(&mut rng, &config);
        let generator = Generator::init(&mut rng, &config);
        let discriminator = Discriminator::init(&mut rng, &config);
        Ok(DisCoPatch {
            config,
            encoder,
            generator,
            discriminator,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.generator.param_count() + self.discriminator.param_count()
    }

    /// Train or eval mode for the encoder and generator norm layers.
    pub fn set_vae_mode(&mut self, mode: NormMode) {
        self.encoder.set_mode(mode);
        self.generator.set_mode(mode);
    }

    /// Discriminator realness scores for a batch of patches.
    pub fn discriminate(&self, patches: &Tensor<T>, source: StatsSource) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.discriminator.bind(&mut tape, false);
        let x = tape.constant(patches.shape(), patches.data().to_vec())?;
        let (d, _) = self.discriminator.forward(&mut tape, &bound, &self.config, x, source)?;
        Ok(tape.value(d).to_vec())
    }

    /// Flattened discriminator trunk activations per patch.
    pub fn features(&self, patches: &Tensor<T>, source: StatsSource) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.discriminator.bind(&mut tape, false);
        let x = tape.constant(patches.shape(), patches.data().to_vec())?;
        let (f, _) = self.discriminator.features(&mut tape, &bound, &self.config, x, source)?;
        Ok(tape.to_tensor(f))
    }

    /// All tensors by name, prefixed per network.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, items) in [
            ("encoder", self.encoder.state_tensors()),
            ("generator", self.generator.state_tensors()),
            ("discriminator", self.discriminator.state_tensors()),
        ] {
            out.extend(items.into_iter().map(|(n, t)| (format!("{}.{}", prefix, n), t)));
        }
        out
    }

    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        self.encoder.load_state(&|n| lookup(&format!("encoder.{}", n)))?;
        self.generator.load_state(&|n| lookup(&format!("generator.{}", n)))?;
        self.discriminator.load_state(&|n| lookup(&format!("discriminator.{}", n)))
    }
}
