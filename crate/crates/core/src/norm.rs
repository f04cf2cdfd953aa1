//! Normalization layers: batch norm with running statistics, batch norm over
//! per-image patch groups, group norm and instance norm.
//!
//! Running statistics are kept as variances. The momentum update blends the
//! running variance with the unbiased batch variance, while the forward
//! transform always divides by the population variance of the block.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{NormBlocks, NormStats, Tape, Tensor, Var};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormMode {
    #[default]
    Train,
    Eval,
}

/// Which statistics a normalization layer computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// One statistics pool over the whole batch.
    Batch,
    /// One pool per contiguous group of patches from the same image.
    Patch,
    /// Per sample, over channel groups of the given count.
    Group(usize),
    /// Per sample and channel.
    Instance,
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Batch => "batch",
            NormKind::Patch => "patch",
            NormKind::Group(_) => "group",
            NormKind::Instance => "instance",
        }
    }

    /// True for the kinds whose statistics cross sample boundaries.
    pub fn is_batch_like(&self) -> bool {
        matches!(self, NormKind::Batch | NormKind::Patch)
    }
}

/// Partition of a batch into `group_count` contiguous runs of `group_size`
/// patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    group_size: usize,
    group_count: usize,
}

impl GroupLayout {
    pub fn new(group_size: usize, group_count: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::param("group_layout", "group_size must be at least 1"));
        }
        Ok(GroupLayout {
            group_size,
            group_count,
        })
    }

    /// A single group spanning `batch` samples.
    pub fn single(batch: usize) -> Result<Self> {
        Self::new(batch, 1)
    }

    /// Splits `batch` into groups of `group_size`.
    pub fn for_batch(batch: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 || batch % group_size != 0 {
            return Err(Error::shape(
                "group_layout",
                format!("batch {} is not a multiple of group size {}", batch, group_size),
            ));
        }
        Self::new(group_size, batch / group_size)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn batch(&self) -> usize {
        self.group_size * self.group_count
    }

    pub fn check(&self, batch: usize, op: &'static str) -> Result<()> {
        if batch != self.batch() {
            return Err(Error::shape(
                op,
                format!(
                    "batch {} vs layout {} × {}",
                    batch, self.group_count, self.group_size
                ),
            ));
        }
        Ok(())
    }
}

/// Per-layer normalization state: affine parameters, running statistics and
/// the flags that decide which statistics the forward pass reads.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub momentum: f64,
    pub track_running_stats: bool,
    pub mode: NormMode,
    pub eps: f64,
}

impl<T: Real> NormState<T> {
    /// `γ = 1`, `β = 0`, running mean 0 and variance 1, train mode.
    pub fn new(channels: usize, momentum: f64, track_running_stats: bool) -> Self {
        NormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            gamma: Tensor::full(&[channels], T::one()).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            momentum,
            track_running_stats,
            mode: NormMode::Train,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Whether the forward pass reads the running statistics.
    pub fn uses_running(&self) -> bool {
        self.mode == NormMode::Eval && self.track_running_stats
    }

    /// Whether a forward pass should feed [`NormState::update_running`].
    pub fn updates_running(&self) -> bool {
        self.mode == NormMode::Train && self.track_running_stats
    }

    /// Momentum update of the running statistics from a batch mean and
    /// unbiased batch variance.
    pub fn update_running(&mut self, mean: &[f64], var_unbiased: &[f64]) -> Result<()> {
        if self.mode != NormMode::Train {
            return Err(Error::Contract("running statistics updated in eval mode".into()));
        }
        if !self.track_running_stats {
            return Err(Error::Contract(
                "running statistics updated on a layer that does not track them".into(),
            ));
        }
        if mean.len() != self.channels() || var_unbiased.len() != self.channels() {
            return Err(Error::shape(
                "update_running",
                format!("{} channels but {} statistics", self.channels(), mean.len()),
            ));
        }
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = T::from_f64_lossy(ema(self.running_mean[c].as_f64(), mean[c], m));
            self.running_var[c] = T::from_f64_lossy(ema(self.running_var[c].as_f64(), var_unbiased[c], m));
        }
        Ok(())
    }
}

/// `(1 − m)·running + m·batch`, the running-statistics blend.
///
/// `m = 0` returns `running` and `m = 1` returns `batch` unchanged.
pub fn ema(running: f64, batch: f64, m: f64) -> f64 {
    if m == 0.0 {
        running
    } else if m == 1.0 {
        batch
    } else {
        (1.0 - m) * running + m * batch
    }
}

/// Per-channel mean and population variance over N, H, W.
pub fn batch_stats<T: Real>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let count = n * h * w;
    if count == 0 {
        return Err(Error::Empty("batch_stats"));
    }
    let hw = h * w;
    let data = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let planes = || (0..n).map(move |ni| &data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        let mu = planes().flatten().map(|v| v.as_f64()).sum::<f64>() / count as f64;
        let sq = planes()
            .flatten()
            .map(|v| {
                let d = v.as_f64() - mu;
                d * d
            })
            .sum::<f64>();
        mean[ci] = mu;
        var[ci] = sq / count as f64;
    }
    Ok((mean, var))
}

/// Pools per-group statistics (`groups × channels`, row-major) into
/// whole-batch per-channel mean and unbiased variance.
pub fn pool_group_stats(stats: &NormStats, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let groups = stats.mean.len() / channels.max(1);
    if groups <= 1 {
        return (stats.mean.clone(), stats.var_unbiased.clone());
    }
    let total = (stats.count * groups) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mu = (0..groups).map(|g| stats.mean[g * channels + c]).sum::<f64>() / groups as f64;
        let pop = (0..groups)
            .map(|g| {
                let d = stats.mean[g * channels + c] - mu;
                stats.var[g * channels + c] + d * d
            })
            .sum::<f64>()
            / groups as f64;
        mean[c] = mu;
        var[c] = if total > 1.0 { pop * total / (total - 1.0) } else { pop };
    }
    (mean, var)
}

/// Where a batch-like layer takes its statistics from in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsSource {
    /// Statistics of the current input, pooled per group of the layout.
    Batch(GroupLayout),
    /// Frozen running statistics.
    Running,
}

/// Applies a normalization layer on the tape. `gamma`/`beta` are the bound
/// affine parameters of `state`. Returns the block statistics when batch
/// statistics were computed.
#[allow(clippy::too_many_arguments)]
pub fn norm_layer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &NormState<T>,
    kind: NormKind,
    source: StatsSource,
    stats_grad: bool,
) -> Result<(Var, Option<NormStats>)> {
    let (n, c) = match *tape.shape(x) {
        [n, c, _, _] => (n, c),
        _ => return Err(Error::shape("norm_layer", format!("expected NCHW, got {:?}", tape.shape(x)))),
    };
    if c != state.channels() {
        return Err(Error::shape(
            "norm_layer",
            format!("input has {} channels, layer {}", c, state.channels()),
        ));
    }
    let blocks = match kind {
        NormKind::Group(groups) => {
            if groups == 0 || c % groups != 0 {
                return Err(Error::shape(
                    "group_norm",
                    format!("{} channels do not split into {} groups", c, groups),
                ));
            }
            NormBlocks {
                samples: 1,
                channels: c / groups,
            }
        }
        NormKind::Instance => NormBlocks {
            samples: 1,
            channels: 1,
        },
        NormKind::Batch | NormKind::Patch => match source {
            StatsSource::Running => {
                if !state.track_running_stats {
                    return Err(Error::Contract(
                        "running statistics requested from a layer that does not track them".into(),
                    ));
                }
                let y = tape.channel_affine(x, gamma, beta, &state.running_mean, &state.running_var, state.eps)?;
                return Ok((y, None));
            }
            StatsSource::Batch(layout) => {
                layout.check(n, "norm_layer")?;
                let samples = if kind == NormKind::Batch { n } else { layout.group_size() };
                NormBlocks { samples, channels: 1 }
            }
        },
    };
    let (y, stats) = tape.normalize(x, gamma, beta, blocks, state.eps, stats_grad)?;
    Ok((y, Some(stats)))
}

fn forward_const<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &NormState<T>,
    kind: NormKind,
    source: StatsSource,
) -> Result<(Tensor<T>, Option<NormStats>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.shape(), x.data().to_vec())?;
    let g = tape.constant(gamma.shape(), gamma.data().to_vec())?;
    let b = tape.constant(beta.shape(), beta.data().to_vec())?;
    let (y, stats) = norm_layer(&mut tape, xv, g, b, state, kind, source, false)?;
    Ok((tape.to_tensor(y), stats))
}

/// Batch normalization of a whole batch. Batch statistics are used unless
/// the layer is in eval mode and tracks running statistics; in train mode
/// with tracking the running statistics are updated.
pub fn batchnorm_forward<T: Real>(x: &Tensor<T>, state: &mut NormState<T>) -> Result<Tensor<T>> {
    let (n, _, _, _) = x.dims4()?;
    let source = if state.uses_running() {
        StatsSource::Running
    } else {
        StatsSource::Batch(GroupLayout::single(n)?)
    };
    let (y, stats) = forward_const(x, &state.gamma, &state.beta, state, NormKind::Batch, source)?;
    if let Some(stats) = stats {
        if state.updates_running() {
            state.update_running(&stats.mean, &stats.var_unbiased)?;
        }
    }
    Ok(y)
}

/// Batch statistics computed separately for each contiguous group of
/// `layout.group_size()` samples, with the shared affine parameters.
pub fn patchnorm_forward<T: Real>(x: &Tensor<T>, state: &NormState<T>, layout: GroupLayout) -> Result<Tensor<T>> {
    let (n, _, _, _) = x.dims4()?;
    if layout.group_size() == 0 || n % layout.group_size() != 0 {
        return Err(Error::shape(
            "patchnorm_forward",
            format!("batch {} is not a multiple of group size {}", n, layout.group_size()),
        ));
    }
    let (y, _) = forward_const(x, &state.gamma, &state.beta, state, NormKind::Patch, StatsSource::Batch(layout))?;
    Ok(y)
}

pub fn groupnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, _, _) = x.dims4()?;
    let mut state = NormState::new(c, 0.0, false);
    state.eps = eps;
    let layout = GroupLayout::single(n)?;
    Ok(forward_const(x, gamma, beta, &state, NormKind::Group(groups), StatsSource::Batch(layout))?.0)
}

pub fn instancenorm_forward<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (n, c, _, _) = x.dims4()?;
    let mut state = NormState::new(c, 0.0, false);
    state.eps = eps;
    let layout = GroupLayout::single(n)?;
    Ok(forward_const(x, gamma, beta, &state, NormKind::Instance, StatsSource::Batch(layout))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_channel(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(&[vals.len(), 1, 1, 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn batch_stats_examples() {
        let (m, v) = batch_stats(&one_channel(&[1.0, 2.0, 3.0])).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-15);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        let (m, v) = batch_stats(&one_channel(&[5.0; 4])).unwrap();
        assert_eq!((m[0], v[0]), (5.0, 0.0));
        let (m, v) = batch_stats(&one_channel(&[7.0])).unwrap();
        assert_eq!((m[0], v[0]), (7.0, 0.0));
        assert!(batch_stats(&Tensor::<f32>::zeros(&[0, 1, 1, 1])).is_err());
    }

    #[test]
    fn batchnorm_standardizes_ramp() {
        let mut st = NormState::<f64>::new(1, 0.1, false);
        st.eps = 0.0;
        let y = batchnorm_forward(&one_channel(&[1.0, 2.0, 3.0]), &mut st).unwrap();
        let s = libm::sqrt(2.0 / 3.0);
        let want = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((want[2] - 1.22474).abs() < 1e-5);
    }

    #[test]
    fn constant_batch_maps_to_zero() {
        let mut st = NormState::<f32>::new(1, 0.1, false);
        let x = Tensor::full(&[4, 1, 2, 2], 3.0f32);
        assert!(batchnorm_forward(&x, &mut st).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut st = NormState::<f64>::new(1, 0.1, true);
        st.mode = NormMode::Eval;
        st.eps = 0.0;
        st.gamma = Tensor::full(&[1], 2.0);
        st.beta = Tensor::full(&[1], 1.0);
        let y = batchnorm_forward(&one_channel(&[1.0]), &mut st).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn ema_blend_example() {
        assert!((ema(0.0, 2.0, 0.1) - 0.2).abs() < 1e-15);
        assert!((ema(1.0, 0.5, 0.1) - 0.95).abs() < 1e-15);
        assert_eq!(ema(0.3, 9.0, 0.0), 0.3);
        assert_eq!(ema(0.3, 9.0, 1.0), 9.0);
    }

    #[test]
    fn update_running_rejects_eval_and_untracked() {
        let mut st = NormState::<f32>::new(1, 0.1, true);
        st.mode = NormMode::Eval;
        assert!(matches!(st.update_running(&[0.0], &[1.0]), Err(Error::Contract(_))));
        let mut st = NormState::<f32>::new(1, 0.1, false);
        assert!(matches!(st.update_running(&[0.0], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn train_forward_updates_running_with_unbiased_variance() {
        let mut st = NormState::<f64>::new(1, 1.0, true);
        batchnorm_forward(&one_channel(&[1.0, 2.0, 3.0]), &mut st).unwrap();
        assert_eq!(st.running_mean[0], 2.0);
        assert!((st.running_var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn untracked_layer_ignores_running_stats_in_eval() {
        let mut st = NormState::<f64>::new(1, 0.1, false);
        st.mode = NormMode::Eval;
        st.running_mean[0] = f64::NAN;
        st.running_var[0] = f64::NAN;
        let y = batchnorm_forward(&one_channel(&[1.0, 3.0]), &mut st).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn single_group_patchnorm_is_batchnorm() {
        let x = Tensor::<f64>::from_fn(&[4, 2, 3, 3], |i| libm::sin(i as f64 * 0.7));
        let mut st = NormState::new(2, 0.1, false);
        let a = batchnorm_forward(&x, &mut st).unwrap();
        let b = patchnorm_forward(&x, &st, GroupLayout::single(4).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patchnorm_groups_are_independent() {
        let g1 = Tensor::<f32>::from_fn(&[3, 2, 4, 4], |i| libm::sinf(i as f32 * 0.31));
        let g2 = Tensor::<f32>::from_fn(&[3, 2, 4, 4], |i| 10.0 * libm::cosf(i as f32 * 0.17));
        let st = NormState::new(2, 0.1, false);
        let both = Tensor::concat_batch(&[&g1, &g2]).unwrap();
        let y = patchnorm_forward(&both, &st, GroupLayout::new(3, 2).unwrap()).unwrap();
        let alone = patchnorm_forward(&g1, &st, GroupLayout::new(3, 1).unwrap()).unwrap();
        for (a, b) in y.slice_batch(0, 3).unwrap().data().iter().zip(alone.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(patchnorm_forward(&both, &st, GroupLayout::new(4, 1).unwrap()).is_err());
    }

    #[test]
    fn identical_patches_normalize_to_zero() {
        let p = Tensor::<f32>::from_fn(&[1, 2, 3, 3], |i| i as f32);
        let x = Tensor::concat_batch(&[&p, &p, &p]).unwrap();
        let st = NormState::new(2, 0.1, false);
        let y = patchnorm_forward(&x, &st, GroupLayout::new(3, 1).unwrap()).unwrap();
        let (m, _) = batch_stats(&y).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-6));
        let c = Tensor::<f32>::full(&[2, 1, 2, 2], 4.0);
        let y = patchnorm_forward(&c, &NormState::new(1, 0.1, false), GroupLayout::new(2, 1).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn groupnorm_with_channel_groups_is_instancenorm() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |i| libm::cos(i as f64 * 1.3));
        let g = Tensor::from_fn(&[4], |i| 1.0 + i as f64);
        let b = Tensor::from_fn(&[4], |i| i as f64 * 0.5);
        let a = groupnorm_forward(&x, &g, &b, 4, 1e-5).unwrap();
        let i = instancenorm_forward(&x, &g, &b, 1e-5).unwrap();
        assert_eq!(a, i);
        assert!(groupnorm_forward(&x, &g, &b, 3, 1e-5).is_err());
    }

    #[test]
    fn instancenorm_of_constant_sample_is_zero() {
        let x = Tensor::<f32>::full(&[1, 2, 3, 3], 5.0);
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        assert!(instancenorm_forward(&x, &g, &b, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_sample_norms_ignore_other_samples() {
        let a = Tensor::<f32>::from_fn(&[1, 4, 3, 3], |i| libm::sinf(i as f32));
        let b = Tensor::<f32>::from_fn(&[1, 4, 3, 3], |i| 100.0 * libm::cosf(i as f32));
        let g = Tensor::full(&[4], 1.5f32);
        let bt = Tensor::full(&[4], -0.5f32);
        let ab = Tensor::concat_batch(&[&a, &b]).unwrap();
        for groups in [1, 2, 4] {
            let joint = groupnorm_forward(&ab, &g, &bt, groups, 1e-5).unwrap();
            let solo = groupnorm_forward(&a, &g, &bt, groups, 1e-5).unwrap();
            for (x, y) in joint.slice_batch(0, 1).unwrap().data().iter().zip(solo.data()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn pooled_group_stats_match_whole_batch() {
        let x = Tensor::<f64>::from_fn(&[6, 2, 2, 2], |i| libm::sin(i as f64 * 0.9) * (1 + i % 3) as f64);
        let st = NormState::new(2, 0.1, false);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let g = tape.leaf(&st.gamma);
        let b = tape.leaf(&st.beta);
        let layout = GroupLayout::new(2, 3).unwrap();
        let (_, stats) = norm_layer(&mut tape, xv, g, b, &st, NormKind::Patch, StatsSource::Batch(layout), true).unwrap();
        let (mean, var_u) = pool_group_stats(&stats.unwrap(), 2);
        let (m, v) = batch_stats(&x).unwrap();
        let count = 6.0 * 4.0;
        for c in 0..2 {
            assert!((mean[c] - m[c]).abs() < 1e-12);
            assert!((var_u[c] - v[c] * count / (count - 1.0)).abs() < 1e-12);
        }
    }
}
