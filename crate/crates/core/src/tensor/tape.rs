use super::conv::{
    self, Conv2dShape, ConvBackend, ConvGeom, ConvTransposeGeom, ConvTransposeShape,
};
use super::{dims4, numel, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// Negative-side slope.
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => libm::tanh(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// How an NCHW tensor is carved into normalization blocks: each block spans
/// `samples` consecutive batch entries, `channels` consecutive channels and
/// the full spatial extent.
///
/// Batch norm over the whole batch is `{ samples: N, channels: 1 }`, per-image
/// patch groups are `{ samples: group_size, channels: 1 }`, group norm is
/// `{ samples: 1, channels: C / groups }` and instance norm `{ 1, 1 }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormBlocks {
    pub samples: usize,
    pub channels: usize,
}

/// Statistics of every block of a [`Tape::normalize`] call, in
/// `(sample block, channel block)` row-major order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population variance, used for normalizing.
    pub var: Vec<f64>,
    /// `var · M / (M − 1)`; equals `var` when a block has one element.
    pub var_unbiased: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: Conv2dShape,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvTransposeShape,
        geom: ConvTransposeGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        f: usize,
        g: usize,
    },
    Act(Var, Activation),
    Exp(Var),
    Log(Var),
    Square(Var),
    Scale(Var, T),
    Shift(Var),
    Clamp(Var, T, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        blocks: NormBlocks,
        dims: [usize; 4],
        xhat: Vec<T>,
        inv_std: Vec<T>,
        stats_grad: bool,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: [usize; 4],
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } | Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Act(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Clamp(x, _, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Slice { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Normalize { x, gamma, beta, .. } | Op::ChannelAffine { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Concat(parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Linear { .. } => "linear",
            Op::Act(..) => "activation",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Clamp(..) => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Normalize { .. } => "normalize",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    finite: bool,
}

/// A define-by-run computation graph. Nodes are appended in evaluation
/// order, so reverse creation order is a valid topological order for the
/// backward sweep. A fresh tape is built for every step.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backend: ConvBackend,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_backend(ConvBackend::default())
    }

    pub fn with_backend(backend: ConvBackend) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backend,
        }
    }

    pub fn backend(&self) -> ConvBackend {
        self.backend
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let finite = if cfg!(debug_assertions) {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
            let out_finite = value.iter().all(|x| x.is_finite());
            debug_assert!(
                !inputs_finite || out_finite,
                "{} produced non-finite values from finite inputs",
                op.name()
            );
            out_finite
        } else {
            true
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            finite,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        let finite = value.iter().all(|x| x.is_finite());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
            finite,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push_leaf(shape, value, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- layers -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let [n, c, h, wd] = self.nchw(x, "conv2d")?;
        let [o, i, k, k2] = self.nchw(w, "conv2d")?;
        if i != c || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel {:?}", c, self.shape(w)),
            ));
        }
        self.check_bias(b, o, "conv2d")?;
        let shape = Conv2dShape::new([n, c, h, wd], o, k, geom)?;
        let out = conv::conv2d_forward(
            self.backend,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &shape,
            geom,
        );
        Ok(self.push(vec![n, o, shape.oh, shape.ow], out, Op::Conv2d { x, w, b, shape, geom }))
    }

    /// Transposed convolution with an `in × out × k × k` kernel.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTransposeGeom,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.nchw(x, "conv_transpose2d")?;
        let [i, o, k, k2] = self.nchw(w, "conv_transpose2d")?;
        if i != c || k != k2 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input channels {} vs kernel {:?}", c, self.shape(w)),
            ));
        }
        self.check_bias(b, o, "conv_transpose2d")?;
        let shape = ConvTransposeShape::new([n, c, h, wd], o, k, geom)?;
        let out = conv::conv_transpose2d_forward(
            self.backend,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &shape,
            geom,
        );
        Ok(self.push(
            vec![n, o, shape.oh, shape.ow],
            out,
            Op::ConvTranspose2d { x, w, b, shape, geom },
        ))
    }

    /// `x · wᵀ + b` for `x: N×F`, `w: G×F`, `b: G`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(Error::shape("linear", format!("input must be N×F, got {:?}", s))),
        };
        let g = match *self.shape(w) {
            [g, f2] if f2 == f => g,
            ref s => {
                return Err(Error::shape(
                    "linear",
                    format!("weight {:?} does not match input width {}", s, f),
                ))
            }
        };
        self.check_bias(b, g, "linear")?;
        let mut out = vec![T::zero(); n * g];
        T::gemm(n, f, g, self.value(x), false, self.value(w), true, T::zero(), &mut out);
        if let Some(b) = b {
            let bias = self.value(b);
            out.chunks_mut(g).for_each(|row| row.iter_mut().zip(bias).for_each(|(o, &b)| *o += b));
        }
        Ok(self.push(vec![n, g], out, Op::Linear { x, w, b, n, f, g }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::LeakyRelu(a) => {
                let a = T::from_f64_lossy(a);
                self.map(x, |v| if v > T::zero() { v } else { a * v })
            }
            Activation::Tanh => self.map(x, |v| v.tanh()),
            Activation::Sigmoid => self.map(x, |v| T::from_f64_lossy(sigmoid(v.as_f64()))),
        };
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Act(x, kind))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.exp());
        self.unary(x, out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.ln());
        self.unary(x, out, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v * v);
        self.unary(x, out, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.map(x, |v| v * c);
        self.unary(x, out, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: Var, c: T) -> Var {
        let out = self.map(x, |v| v + c);
        self.unary(x, out, Op::Shift(x))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.map(x, |v| v.max(lo).min(hi));
        self.unary(x, out, Op::Clamp(x, lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        self.push(Vec::new(), vec![T::from_f64_lossy(s)], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        Ok(self.push(Vec::new(), vec![T::from_f64_lossy(s / n as f64)], Op::Mean(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            ));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    /// Stacks along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut n = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{:?} vs trailing {:?}", s, tail)));
            }
            n += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&tail);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec())))
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.first().ok_or(Error::Empty("slice"))?;
        if start + len > n {
            return Err(Error::shape("slice", format!("rows {}..{} of {}", start, start + len, n)));
        }
        let row = numel(&s[1..]);
        let value = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(shape, value, Op::Slice { x, start }))
    }

    /// Normalizes each block of `x` by its own mean and population variance,
    /// then applies the per-channel affine `γ·x̂ + β`.
    ///
    /// With `stats_grad = false` the block statistics are treated as constants
    /// in the backward pass.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        blocks: NormBlocks,
        eps: f64,
        stats_grad: bool,
    ) -> Result<(Var, NormStats)> {
        let [n, c, h, w] = self.nchw(x, "normalize")?;
        self.check_affine(gamma, beta, c, "normalize")?;
        if blocks.samples == 0 || blocks.channels == 0 || n % blocks.samples != 0 || c % blocks.channels != 0 {
            return Err(Error::shape(
                "normalize",
                format!(
                    "blocks of {} samples × {} channels do not tile {}×{}",
                    blocks.samples, blocks.channels, n, c
                ),
            ));
        }
        let hw = h * w;
        let count = blocks.samples * blocks.channels * hw;
        if count == 0 {
            return Err(Error::Empty("normalize"));
        }
        let (sb_n, cb_n) = (n / blocks.samples, c / blocks.channels);
        let xs = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = Vec::with_capacity(sb_n * cb_n);
        let mut stats = NormStats {
            count,
            ..NormStats::default()
        };
        for sb in 0..sb_n {
            for cb in 0..cb_n {
                let planes = block_planes(sb, cb, blocks, c, hw);
                let mut sum = 0.0f64;
                for r in planes.clone() {
                    sum += xs[r].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for r in planes.clone() {
                    sq += xs[r]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                let istd = 1.0 / libm::sqrt(var + eps);
                let (m_t, istd_t) = (T::from_f64_lossy(mean), T::from_f64_lossy(istd));
                for (r, ci) in planes.zip(block_channels(cb, blocks, blocks.samples)) {
                    let (gc, bc) = (g[ci], bt[ci]);
                    for ((o, xh), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xs[r]) {
                        *xh = (v - m_t) * istd_t;
                        *o = *xh * gc + bc;
                    }
                }
                stats.mean.push(mean);
                stats.var.push(var);
                stats
                    .var_unbiased
                    .push(if count > 1 { sq / (count - 1) as f64 } else { var });
                inv_std.push(istd_t);
            }
        }
        let v = self.push(
            vec![n, c, h, w],
            out,
            Op::Normalize {
                x,
                gamma,
                beta,
                blocks,
                dims: [n, c, h, w],
                xhat,
                inv_std,
                stats_grad,
            },
        );
        Ok((v, stats))
    }

    /// Per-channel affine map with frozen statistics:
    /// `(x − mean_c) / sqrt(var_c + eps) · γ_c + β_c`.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "channel_affine")?;
        self.check_affine(gamma, beta, c, "channel_affine")?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "channel_affine",
                format!("{} channels but {} running stats", c, mean.len()),
            ));
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / libm::sqrt(v.as_f64() + eps)))
            .collect();
        let hw = h * w;
        let (xs, g, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                let (a, m) = (g[ci] * inv_std[ci], mean[ci]);
                for (o, &v) in out[r.clone()].iter_mut().zip(&xs[r]) {
                    *o = (v - m) * a + bt[ci];
                }
            }
        }
        Ok(self.push(
            vec![n, c, h, w],
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                dims: [n, c, h, w],
                mean: mean.to_vec(),
                inv_std,
            },
        ))
    }

    // ---- helpers ------------------------------------------------------

    fn nchw(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        let (n, c, h, w) = dims4(self.shape(v), op)?;
        Ok([n, c, h, w])
    }

    fn check_bias(&self, b: Option<Var>, len: usize, op: &'static str) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [len] => Err(Error::shape(
                op,
                format!("bias {:?} vs {} outputs", self.shape(b), len),
            )),
            _ => Ok(()),
        }
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize, op: &'static str) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                op,
                format!(
                    "affine {:?}/{:?} vs {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    c
                ),
            ));
        }
        Ok(())
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Vec<T> {
        self.value(x).iter().map(|&v| f(v)).collect()
    }

    fn unary(&mut self, x: Var, out: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of leaves that require
    /// them are added to the tape's gradient store (repeated calls
    /// accumulate until [`Tape::zero_grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                match &mut self.grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&self.nodes, self.backend, id, &g, &mut local);
        }
        Ok(())
    }
}

fn block_planes(
    sb: usize,
    cb: usize,
    blocks: NormBlocks,
    c: usize,
    hw: usize,
) -> impl Iterator<Item = core::ops::Range<usize>> + Clone {
    (0..blocks.samples).flat_map(move |i| {
        let ni = sb * blocks.samples + i;
        (0..blocks.channels).map(move |j| {
            let ci = cb * blocks.channels + j;
            let start = (ni * c + ci) * hw;
            start..start + hw
        })
    })
}

fn block_channels(cb: usize, blocks: NormBlocks, samples: usize) -> impl Iterator<Item = usize> {
    (0..samples).flat_map(move |_| (0..blocks.channels).map(move |j| cb * blocks.channels + j))
}

/// Gradient buffer for `v`, created on demand; `None` when `v` needs none.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    local: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(local[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn take_slot<T: Real>(nodes: &[Node<T>], local: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
    slot(nodes, local, v)?;
    local[v.0].take()
}

fn restore<T>(local: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    if let Some(b) = buf {
        local[v.0] = Some(b);
    }
}

fn add_into<T: Real>(nodes: &[Node<T>], local: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
    if let Some(buf) = slot(nodes, local, v) {
        buf.iter_mut().enumerate().for_each(|(i, a)| *a += f(i));
    }
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    backend: ConvBackend,
    id: usize,
    g: &[T],
    local: &mut [Option<Vec<T>>],
) {
    let node = &nodes[id];
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, shape, geom } => {
            let mut dx = take_slot(nodes, local, *x);
            let mut dw = take_slot(nodes, local, *w);
            let mut db = b.and_then(|b| take_slot(nodes, local, b));
            conv::conv2d_backward(
                backend,
                val(*x),
                val(*w),
                shape,
                *geom,
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            restore(local, *x, dx);
            restore(local, *w, dw);
            if let Some(b) = b {
                restore(local, *b, db);
            }
        }
        Op::ConvTranspose2d { x, w, b, shape, geom } => {
            let mut dx = take_slot(nodes, local, *x);
            let mut dw = take_slot(nodes, local, *w);
            let mut db = b.and_then(|b| take_slot(nodes, local, b));
            conv::conv_transpose2d_backward(
                backend,
                val(*x),
                val(*w),
                shape,
                *geom,
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            restore(local, *x, dx);
            restore(local, *w, dw);
            if let Some(b) = b {
                restore(local, *b, db);
            }
        }
        Op::Linear { x, w, b, n, f, g: width } => {
            let (n, f, gw) = (*n, *f, *width);
            if let Some(dx) = slot(nodes, local, *x) {
                T::gemm(n, gw, f, g, false, val(*w), false, T::one(), dx);
            }
            if let Some(dw) = slot(nodes, local, *w) {
                T::gemm(gw, n, f, g, true, val(*x), false, T::one(), dw);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, local, *b) {
                    for row in g.chunks(gw) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
        Op::Act(x, kind) => {
            let (xs, ys) = (val(*x), &node.value);
            match *kind {
                Activation::LeakyRelu(a) => {
                    let a = T::from_f64_lossy(a);
                    add_into(nodes, local, *x, |i| if xs[i] > T::zero() { g[i] } else { g[i] * a });
                }
                Activation::Tanh => add_into(nodes, local, *x, |i| g[i] * (T::one() - ys[i] * ys[i])),
                Activation::Sigmoid => add_into(nodes, local, *x, |i| g[i] * ys[i] * (T::one() - ys[i])),
            }
        }
        Op::Exp(x) => {
            let ys = &node.value;
            add_into(nodes, local, *x, |i| g[i] * ys[i]);
        }
        Op::Log(x) => {
            let xs = val(*x);
            add_into(nodes, local, *x, |i| g[i] / xs[i]);
        }
        Op::Square(x) => {
            let xs = val(*x);
            let two = T::one() + T::one();
            add_into(nodes, local, *x, |i| g[i] * two * xs[i]);
        }
        Op::Scale(x, c) => add_into(nodes, local, *x, |i| g[i] * *c),
        Op::Shift(x) | Op::Reshape(x) => add_into(nodes, local, *x, |i| g[i]),
        Op::Clamp(x, lo, hi) => {
            let xs = val(*x);
            add_into(nodes, local, *x, |i| {
                if xs[i] >= *lo && xs[i] <= *hi {
                    g[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::Add(a, b) => {
            add_into(nodes, local, *a, |i| g[i]);
            add_into(nodes, local, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            add_into(nodes, local, *a, |i| g[i]);
            add_into(nodes, local, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            // contributions computed before either buffer is touched so that
            // `a == b` accumulates both terms
            let (av, bv) = (val(*a), val(*b));
            let da: Vec<T> = g.iter().zip(bv).map(|(&g, &y)| g * y).collect();
            let db: Vec<T> = g.iter().zip(av).map(|(&g, &x)| g * x).collect();
            add_into(nodes, local, *a, |i| da[i]);
            add_into(nodes, local, *b, |i| db[i]);
        }
        Op::Sum(x) => add_into(nodes, local, *x, |_| g[0]),
        Op::Mean(x) => {
            let n = T::from_usize(val(*x).len()).unwrap_or_else(T::one);
            let v = g[0] / n;
            add_into(nodes, local, *x, |_| v);
        }
        Op::Normalize {
            x,
            gamma,
            beta,
            blocks,
            dims,
            xhat,
            inv_std,
            stats_grad,
        } => normalize_backward(nodes, local, g, *x, *gamma, *beta, *blocks, *dims, xhat, inv_std, *stats_grad),
        Op::ChannelAffine {
            x,
            gamma,
            beta,
            dims,
            mean,
            inv_std,
        } => {
            let [n, c, h, w] = *dims;
            let hw = h * w;
            let xs = val(*x);
            let gm = val(*gamma);
            if let Some(dx) = slot(nodes, local, *x) {
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                        let a = gm[ci] * inv_std[ci];
                        dx[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, &gv)| *d += gv * a);
                    }
                }
            }
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            for ni in 0..n {
                for ci in 0..c {
                    let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                    for (&gv, &xv) in g[r.clone()].iter().zip(&xs[r]) {
                        dgamma[ci] += (gv * (xv - mean[ci]) * inv_std[ci]).as_f64();
                        dbeta[ci] += gv.as_f64();
                    }
                }
            }
            add_into(nodes, local, *gamma, |i| T::from_f64_lossy(dgamma[i]));
            add_into(nodes, local, *beta, |i| T::from_f64_lossy(dbeta[i]));
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                let o = offset;
                add_into(nodes, local, *p, |i| g[o + i]);
                offset += len;
            }
        }
        Op::Slice { x, start } => {
            let row = numel(&node.shape[1..]);
            let base = start * row;
            let len = g.len();
            if let Some(dx) = slot(nodes, local, *x) {
                dx[base..base + len].iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn normalize_backward<T: Real>(
    nodes: &[Node<T>],
    local: &mut [Option<Vec<T>>],
    g: &[T],
    x: Var,
    gamma: Var,
    beta: Var,
    blocks: NormBlocks,
    dims: [usize; 4],
    xhat: &[T],
    inv_std: &[T],
    stats_grad: bool,
) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let gm = &nodes[gamma.0].value;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
            for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ci] += (gv * xh).as_f64();
                dbeta[ci] += gv.as_f64();
            }
        }
    }
    if let Some(dx) = slot(nodes, local, x) {
        let (sb_n, cb_n) = (n / blocks.samples, c / blocks.channels);
        let count = (blocks.samples * blocks.channels * hw) as f64;
        for sb in 0..sb_n {
            for cb in 0..cb_n {
                let istd = inv_std[sb * cb_n + cb];
                let planes = block_planes(sb, cb, blocks, c, hw);
                let chans = block_channels(cb, blocks, blocks.samples);
                if !stats_grad {
                    for (r, ci) in planes.zip(chans) {
                        let a = gm[ci] * istd;
                        dx[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, &gv)| *d += gv * a);
                    }
                    continue;
                }
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for (r, ci) in planes.clone().zip(chans) {
                    let gc = gm[ci].as_f64();
                    for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        let d = gv.as_f64() * gc;
                        s1 += d;
                        s2 += d * xh.as_f64();
                    }
                }
                let (m1, m2) = (T::from_f64_lossy(s1 / count), T::from_f64_lossy(s2 / count));
                for (r, ci) in planes.zip(block_channels(cb, blocks, blocks.samples)) {
                    let gc = gm[ci];
                    for ((d, &gv), &xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                        *d += istd * (gv * gc - m1 - xh * m2);
                    }
                }
            }
        }
    }
    add_into(nodes, local, gamma, |i| T::from_f64_lossy(dgamma[i]));
    add_into(nodes, local, beta, |i| T::from_f64_lossy(dbeta[i]));
}

impl core::fmt::Display for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "%{}", self.0)
    }
}
