//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Moments sized for the given parameter lengths; β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (first_moment, second_moment): (Vec<_>, Vec<_>) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        AdamState {
            first_moment,
            second_moment,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[Tensor<T>]) -> Self {
        Self::new(params.iter().map(Tensor::numel))
    }

    /// One update over `params` using their gradient buffers; a parameter
    /// without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], lr: f64) -> Result<()> {
        self.check(params.len(), |i| params[i].numel())?;
        let (bc1, bc2) = self.advance();
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(<[T]>::to_vec);
            let zeros;
            let g: &[T] = match &grad {
                Some(g) => g,
                None => {
                    zeros = vec![T::zero(); p.numel()];
                    &zeros
                }
            };
            self.update_one(i, p.data_mut(), g, lr, bc1, bc2);
        }
        Ok(())
    }

    /// One update with explicit gradient slices.
    pub fn step_slices(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        self.check(params.len(), |i| params[i].len())?;
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {} has {} values, parameter {}", i, g.len(), params[i].len()),
                ));
            }
        }
        let (bc1, bc2) = self.advance();
        for (i, p) in params.iter_mut().enumerate() {
            self.update_one(i, p, grads[i], lr, bc1, bc2);
        }
        Ok(())
    }

    fn check(&self, count: usize, len: impl Fn(usize) -> usize) -> Result<()> {
        if count != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!("optimizer tracks {} parameters, got {}", self.first_moment.len(), count),
            ));
        }
        for (i, m) in self.first_moment.iter().enumerate() {
            if m.len() != len(i) {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {} has {} values, moments {}", i, len(i), m.len()),
                ));
            }
        }
        Ok(())
    }

    fn advance(&mut self) -> (f64, f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        (1.0 - libm::pow(self.beta1, t as f64), 1.0 - libm::pow(self.beta2, t as f64))
    }

    fn update_one(&mut self, i: usize, p: &mut [T], g: &[T], lr: f64, bc1: f64, bc2: f64) {
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        let m = &mut self.first_moment[i];
        let v = &mut self.second_moment[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar reference written straight from the update rule.
    fn scalar_adam(p: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut p) = (0.0, 0.0, p);
        let mut trace = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            trace.push(p);
        }
        trace
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [1.0f64];
        let mut st = AdamState::<f64>::new([1]);
        st.step_slices(&mut [&mut p[..]], &[&[1.0]], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn two_steps_follow_scalar_trace() {
        let want = scalar_adam(1.0, &[1.0, 1.0], 0.1);
        let mut p = [1.0f64];
        let mut st = AdamState::<f64>::new([1]);
        for w in &want {
            st.step_slices(&mut [&mut p[..]], &[&[1.0]], 0.1).unwrap();
            assert_eq!(p[0], *w);
        }
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut t = Tensor::<f32>::from_fn(&[3], |i| i as f32 - 1.0).with_grad();
        t.accumulate_grad(&[0.0; 3]).unwrap();
        let before = t.clone();
        let mut params = [t];
        let mut st = AdamState::for_params(&params);
        st.step(&mut params, 1e-3).unwrap();
        assert_eq!(params[0].data(), before.data());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut st = AdamState::<f32>::new([2]);
        let mut p = [0.0f32; 3];
        assert!(st.step_slices(&mut [&mut p[..]], &[&[0.0; 3]], 0.1).is_err());
        let mut q = [0.0f32; 2];
        assert!(st.step_slices(&mut [&mut q[..]], &[&[0.0; 3]], 0.1).is_err());
        assert_eq!(st.step_count, 0);
    }
}
