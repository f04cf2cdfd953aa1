//! Central finite-difference checks of the reverse-mode gradients, in f64.
//!
//! Every case reduces an op's output to a scalar through a fixed random
//! projection, then compares the tape gradient of each input with
//! `(f(x + h) − f(x − h)) / 2h`.

use discopatch_core::model::{reparameterize, Network};
use discopatch_core::norm::GroupLayout;
use discopatch_core::rng::{normal_vec, rng_from_seed, DetRng};
use discopatch_core::tensor::{Activation, ConvBackend, ConvGeom, ConvTransposeGeom, NormBlocks};
use discopatch_core::train::{discriminator_objective, loss_dcp, AdversarialForm, DiscObjective, LossWeights};
use discopatch_core::{DisCoPatch, ModelConfig, NormKind, Result, StatsSource, Tape, Tensor, Var};
use rand::Rng;

/// Small enough that probes rarely straddle an activation kink, large
/// enough that f64 rounding stays far below the tolerance.
pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-3;
/// Coordinates probed per input tensor.
const PROBES: usize = 24;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Default)]
pub struct Summary {
    pub cases: usize,
    pub probes: usize,
    pub worst: f64,
    pub worst_case: String,
    pub failures: Vec<String>,
}

impl Summary {
    fn record(&mut self, case: &str, err: f64, detail: impl FnOnce() -> String) {
        self.probes += 1;
        if err > self.worst {
            self.worst = err;
            self.worst_case = case.to_string();
        }
        if err > REL_TOL {
            self.failures.push(detail());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn project(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(&shape, weights.to_vec())?;
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn eval_loss(build: &Build, backend: ConvBackend, inputs: &[Tensor<f64>], proj: &[f64]) -> f64 {
    let mut tape = Tape::with_backend(backend);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.constant(t.shape(), t.data().to_vec()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, proj).unwrap();
    tape.scalar(loss)
}

fn probe_indices(rng: &mut DetRng, len: usize) -> Vec<usize> {
    if len <= PROBES {
        (0..len).collect()
    } else {
        (0..PROBES).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Checks one op instance; `inputs` are differentiated, `build` produces the
/// op output from them.
pub fn check_op(summary: &mut Summary, name: &str, seed: u64, inputs: Vec<Tensor<f64>>, build: &Build) {
    check_op_backend(summary, name, seed, inputs, ConvBackend::default(), build)
}

fn normal(rng: &mut DetRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = normal_vec(rng, n);
    Tensor::new(shape, v.into_iter().map(|x| x * scale).collect()).unwrap()
}

fn positive(rng: &mut DetRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.3..2.0)).collect()).unwrap()
}

/// Every differentiable tape op, `seeds` random instances each.
pub fn check_ops(summary: &mut Summary, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = rng_from_seed(seed);
        let r = &mut rng;

        for (label, backend) in [("direct", ConvBackend::Direct), ("im2col", ConvBackend::Im2col)] {
            for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
                let geom = ConvGeom::new(stride, pad).unwrap();
                let build = move |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), geom);
                let inputs = vec![normal(r, &[2, 3, 5, 5], 1.0), normal(r, &[4, 3, 3, 3], 0.5), normal(r, &[4], 0.5)];
                check_op_backend(summary, &format!("conv2d/{}/s{}p{}", label, stride, pad), seed, inputs, backend, &build);
            }
            let up = ConvTransposeGeom::new(2, 1, 1).unwrap();
            let inputs = vec![normal(r, &[2, 3, 3, 3], 1.0), normal(r, &[3, 2, 3, 3], 0.5), normal(r, &[2], 0.5)];
            check_op_backend(
                summary,
                &format!("conv_transpose2d/{}/s2p1o1", label),
                seed,
                inputs,
                backend,
                &move |t: &mut Tape<f64>, v: &[Var]| t.conv_transpose2d(v[0], v[1], Some(v[2]), up),
            );
            let plain = ConvTransposeGeom::new(1, 0, 0).unwrap();
            let inputs = vec![normal(r, &[1, 2, 4, 4], 1.0), normal(r, &[2, 3, 3, 3], 0.5)];
            check_op_backend(
                summary,
                &format!("conv_transpose2d/{}/s1p0", label),
                seed,
                inputs,
                backend,
                &move |t: &mut Tape<f64>, v: &[Var]| t.conv_transpose2d(v[0], v[1], None, plain),
            );
        }

        let inputs = vec![normal(r, &[3, 5], 1.0), normal(r, &[4, 5], 0.5), normal(r, &[4], 0.5)];
        check_op(summary, "linear", seed, inputs, &|t, v| t.linear(v[0], v[1], Some(v[2])));

        for (label, act) in [
            ("leaky_relu", Activation::LeakyRelu(0.01)),
            ("tanh", Activation::Tanh),
            ("sigmoid", Activation::Sigmoid),
        ] {
            let inputs = vec![normal(r, &[2, 7], 1.5)];
            check_op(summary, label, seed, inputs, &move |t, v| Ok(t.activation(v[0], act)));
        }

        check_op(summary, "exp", seed, vec![normal(r, &[9], 1.0)], &|t, v| Ok(t.exp(v[0])));
        check_op(summary, "log", seed, vec![positive(r, &[9])], &|t, v| Ok(t.log(v[0])));
        check_op(summary, "square", seed, vec![normal(r, &[9], 1.0)], &|t, v| Ok(t.square(v[0])));
        check_op(summary, "scale", seed, vec![normal(r, &[9], 1.0)], &|t, v| Ok(t.scale(v[0], -1.7)));
        check_op(summary, "shift", seed, vec![normal(r, &[9], 1.0)], &|t, v| Ok(t.shift(v[0], 0.3)));
        check_op(summary, "clamp", seed, vec![normal(r, &[12], 1.0)], &|t, v| Ok(t.clamp(v[0], -0.5, 0.8)));
        let pair = |r: &mut DetRng| vec![normal(r, &[2, 3], 1.0), normal(r, &[2, 3], 1.0)];
        check_op(summary, "add", seed, pair(r), &|t, v| t.add(v[0], v[1]));
        check_op(summary, "sub", seed, pair(r), &|t, v| t.sub(v[0], v[1]));
        check_op(summary, "mul", seed, pair(r), &|t, v| t.mul(v[0], v[1]));
        check_op(summary, "sum", seed, vec![normal(r, &[2, 4], 1.0)], &|t, v| Ok(t.sum(v[0])));
        check_op(summary, "mean", seed, vec![normal(r, &[2, 4], 1.0)], &|t, v| t.mean(v[0]));
        check_op(summary, "reshape", seed, vec![normal(r, &[2, 6], 1.0)], &|t, v| t.reshape(v[0], &[3, 4]));
        let parts = vec![normal(r, &[1, 2, 2, 2], 1.0), normal(r, &[2, 2, 2, 2], 1.0)];
        check_op(summary, "concat", seed, parts, &|t, v| t.concat(&[v[0], v[1]]));
        check_op(summary, "slice", seed, vec![normal(r, &[4, 2, 2, 2], 1.0)], &|t, v| t.slice(v[0], 1, 2));

        for (label, blocks) in [
            ("batch", NormBlocks { samples: 4, channels: 1 }),
            ("patch_groups", NormBlocks { samples: 2, channels: 1 }),
            ("group", NormBlocks { samples: 1, channels: 2 }),
            ("instance", NormBlocks { samples: 1, channels: 1 }),
        ] {
            let inputs = vec![normal(r, &[4, 4, 3, 3], 1.0), normal(r, &[4], 1.0), normal(r, &[4], 1.0)];
            check_op(summary, &format!("normalize/{}", label), seed, inputs, &move |t, v| {
                Ok(t.normalize(v[0], v[1], v[2], blocks, 1e-5, true)?.0)
            });
        }

        let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..3).map(|_| r.random_range(0.2..2.0)).collect();
        let inputs = vec![normal(r, &[2, 3, 2, 2], 1.0), normal(r, &[3], 1.0), normal(r, &[3], 1.0)];
        check_op(summary, "channel_affine", seed, inputs, &move |t, v| {
            t.channel_affine(v[0], v[1], v[2], &mean, &var, 1e-5)
        });

        check_frozen_stats(summary, seed, r);
    }
}

/// [`check_op`] on tapes using the given convolution backend.
fn check_op_backend(
    summary: &mut Summary,
    name: &str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    backend: ConvBackend,
    build: &Build,
) {
    let mut rng = rng_from_seed(seed ^ 0xdead_beef);
    let mut tape = Tape::with_backend(backend);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.variable(t.shape(), t.data().to_vec()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let proj: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = project(&mut tape, out, &proj).unwrap();
    tape.backward(loss).unwrap();
    summary.cases += 1;
    for (k, input) in inputs.iter().enumerate() {
        let grad = tape.grad(vars[k]).unwrap().to_vec();
        for j in probe_indices(&mut rng, input.numel()) {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (eval_loss(build, backend, &plus, &proj) - eval_loss(build, backend, &minus, &proj)) / (2.0 * STEP);
            let case = format!("{} seed {}", name, seed);
            summary.record(&case, rel_err(grad[j], numeric), || {
                format!("{}: input {} index {}: tape {:.8e} vs fd {:.8e}", case, k, j, grad[j], numeric)
            });
        }
    }
}

/// With statistics treated as constants, normalization must differentiate
/// like the affine map built from those same statistics.
fn check_frozen_stats(summary: &mut Summary, seed: u64, r: &mut DetRng) {
    let x = normal(r, &[3, 2, 2, 2], 1.0);
    let gamma = normal(r, &[2], 1.0);
    let beta = normal(r, &[2], 1.0);
    let blocks = NormBlocks { samples: 3, channels: 1 };
    let stats = {
        let mut t = Tape::new();
        let xv = t.constant(x.shape(), x.data().to_vec()).unwrap();
        let g = t.constant(&[2], gamma.data().to_vec()).unwrap();
        let b = t.constant(&[2], beta.data().to_vec()).unwrap();
        t.normalize(xv, g, b, blocks, 1e-5, false).unwrap().1
    };
    let proj: Vec<f64> = (0..x.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    let grads = |frozen: bool| -> Vec<Vec<f64>> {
        let mut t = Tape::new();
        let xv = t.variable(x.shape(), x.data().to_vec()).unwrap();
        let g = t.variable(&[2], gamma.data().to_vec()).unwrap();
        let b = t.variable(&[2], beta.data().to_vec()).unwrap();
        let y = if frozen {
            t.normalize(xv, g, b, blocks, 1e-5, false).unwrap().0
        } else {
            t.channel_affine(xv, g, b, &stats.mean, &stats.var, 1e-5).unwrap()
        };
        let loss = project(&mut t, y, &proj).unwrap();
        t.backward(loss).unwrap();
        [xv, g, b].iter().map(|&v| t.grad(v).unwrap().to_vec()).collect()
    };
    let (a, b) = (grads(true), grads(false));
    summary.cases += 1;
    for (ga, gb) in a.iter().zip(&b) {
        for (x, y) in ga.iter().zip(gb) {
            let case = format!("normalize/frozen_stats seed {}", seed);
            summary.record(&case, rel_err(*x, *y), || format!("{}: {:.8e} vs {:.8e}", case, x, y));
        }
    }
}

/// Micro model with non-zero output heads so every parameter receives signal.
pub fn micro_model(seed: u64) -> DisCoPatch<f64> {
    let mut cfg = ModelConfig::micro();
    cfg.norm_kind = NormKind::Patch;
    let mut model = DisCoPatch::<f64>::new(cfg, seed).unwrap();
    let mut rng = rng_from_seed(seed.wrapping_add(77));
    let heads: Vec<&mut Tensor<f64>> = {
        let mut out = Vec::new();
        let e = &mut model.encoder;
        out.push(&mut e.mu_head.weight);
        out.push(&mut e.logvar_head.weight);
        out.push(&mut model.discriminator.head.weight);
        out
    };
    for t in heads {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    model
}

struct Fixture {
    x: Tensor<f64>,
    noise: Tensor<f64>,
    z_fake: Tensor<f64>,
    layout: GroupLayout,
    weights: LossWeights,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let n = 4;
    let cfg = ModelConfig::micro();
    let x = Tensor::new(
        &[n, 3, cfg.patch_size, cfg.patch_size],
        (0..n * 3 * cfg.patch_size * cfg.patch_size).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let weights = if seed % 2 == 0 {
        LossWeights::default()
    } else {
        LossWeights { kl: 0.5, rec: 0.7, gen: 0.9 }
    };
    Fixture {
        x,
        noise: normal(&mut rng, &[n, cfg.latent_dim], 1.0),
        z_fake: normal(&mut rng, &[n, cfg.latent_dim], 1.0),
        layout: GroupLayout::new(2, 2).unwrap(),
        weights,
    }
}

const PROB_CLAMP: f64 = 1e-4;

/// The VAE-side objective with encoder and generator trainable.
fn dcp_loss(model: &DisCoPatch<f64>, f: &Fixture, trainable: bool) -> (f64, Vec<Vec<f64>>) {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let eb = model.encoder.bind(&mut tape, trainable);
    let gb = model.generator.bind(&mut tape, trainable);
    let db = model.discriminator.bind(&mut tape, false);
    let x = tape.constant(f.x.shape(), f.x.data().to_vec()).unwrap();
    let (mu, logvar, _) = model.encoder.forward(&mut tape, &eb, cfg, x).unwrap();
    let eps = tape.constant(f.noise.shape(), f.noise.data().to_vec()).unwrap();
    let z = reparameterize(&mut tape, mu, logvar, eps).unwrap();
    let (x_rec, _) = model.generator.forward(&mut tape, &gb, cfg, z).unwrap();
    let zf = tape.constant(f.z_fake.shape(), f.z_fake.data().to_vec()).unwrap();
    let (x_fake, _) = model.generator.forward(&mut tape, &gb, cfg, zf).unwrap();
    let src = StatsSource::Batch(f.layout);
    let (d_rec, _) = model.discriminator.forward(&mut tape, &db, cfg, x_rec, src).unwrap();
    let (d_fake, _) = model.discriminator.forward(&mut tape, &db, cfg, x_fake, src).unwrap();
    let parts = loss_dcp(
        &mut tape,
        x,
        x_rec,
        mu,
        logvar,
        d_rec,
        d_fake,
        f.weights,
        PROB_CLAMP,
        AdversarialForm::OneMinusLog,
    )
    .unwrap();
    let value = tape.scalar(parts.total);
    if !trainable {
        return (value, Vec::new());
    }
    tape.backward(parts.total).unwrap();
    let mut grads = model.encoder.grads(&tape, &eb);
    grads.extend(model.generator.grads(&tape, &gb));
    (value, grads)
}

/// The discriminator objective on fixed real, reconstructed and generated patches.
fn disc_loss(
    model: &DisCoPatch<f64>,
    f: &Fixture,
    inputs: &[Tensor<f64>; 3],
    objective: DiscObjective,
    trainable: bool,
) -> (f64, Vec<Vec<f64>>) {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let db = model.discriminator.bind(&mut tape, trainable);
    let src = StatsSource::Batch(f.layout);
    let mut d = Vec::new();
    for t in inputs {
        let v = tape.constant(t.shape(), t.data().to_vec()).unwrap();
        d.push(model.discriminator.forward(&mut tape, &db, cfg, v, src).unwrap().0);
    }
    let l = discriminator_objective(&mut tape, objective, d[0], d[1], d[2], PROB_CLAMP).unwrap();
    let value = tape.scalar(l);
    if !trainable {
        return (value, Vec::new());
    }
    tape.backward(l).unwrap();
    (value, model.discriminator.grads(&tape, &db))
}

fn probe_params(
    summary: &mut Summary,
    name: &str,
    grads: &[Vec<f64>],
    rng: &mut DetRng,
    mut perturb: impl FnMut(usize, usize, f64) -> f64,
) {
    for (k, g) in grads.iter().enumerate() {
        for j in probe_indices(rng, g.len()).into_iter().take(6) {
            let numeric = (perturb(k, j, STEP) - perturb(k, j, -STEP)) / (2.0 * STEP);
            summary.record(name, rel_err(g[j], numeric), || {
                format!("{}: param {} index {}: tape {:.8e} vs fd {:.8e}", name, k, j, g[j], numeric)
            });
        }
    }
}

/// Composed generator-side and discriminator objectives on the micro model
/// (patch 8, hidden [4, 8], latent 16, 2 groups × 2 patches).
pub fn check_composed(summary: &mut Summary, seeds: u64) {
    for seed in 0..seeds {
        let model = micro_model(seed);
        let f = fixture(seed);
        let mut rng = rng_from_seed(seed ^ 0xc0ffee);

        let (_, grads) = dcp_loss(&model, &f, true);
        let name = format!("loss_dcp seed {}", seed);
        let n_enc = model.encoder.params().len();
        probe_params(summary, &name, &grads, &mut rng, |k, j, h| {
            let mut m = model.clone();
            let t = if k < n_enc {
                m.encoder.params_mut().into_iter().nth(k).unwrap()
            } else {
                m.generator.params_mut().into_iter().nth(k - n_enc).unwrap()
            };
            t.data_mut()[j] += h;
            dcp_loss(&m, &f, false).0
        });
        summary.cases += 1;

        let inputs = [
            f.x.clone(),
            normal(&mut rng, f.x.shape(), 0.5).map(|v| v.tanh()),
            normal(&mut rng, f.x.shape(), 0.5).map(|v| v.tanh()),
        ];
        for objective in [DiscObjective::CrossEntropy, DiscObjective::LogOdds] {
            let (_, grads) = disc_loss(&model, &f, &inputs, objective, true);
            let name = format!("discriminator {:?} seed {}", objective, seed);
            probe_params(summary, &name, &grads, &mut rng, |k, j, h| {
                let mut m = model.clone();
                m.discriminator.params_mut().into_iter().nth(k).unwrap().data_mut()[j] += h;
                disc_loss(&m, &f, &inputs, objective, false).0
            });
            summary.cases += 1;
        }
    }
}

