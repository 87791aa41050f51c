use crate::tensor::{Real, Tensor};
use crate::{Result, TensorError};

/// Adam with decoupled weight decay.
///
/// Each step first shrinks every parameter by `lr * weight_decay` and then
/// applies the bias-corrected Adam update; the decay never enters the
/// moment estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First/second moment buffers, one per parameter tensor, created lazily.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T = f32> {
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl AdamW {
    pub fn step<'a, T: Real>(
        &self,
        state: &mut AdamState<T>,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Tensor<T>],
    ) -> Result<()> {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                detail: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        if state.first.is_empty() {
            state.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            state.second = state.first.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || state.first.get(i).map(Vec::len) != Some(p.numel()) {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }

        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;

        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(state.first.iter_mut().zip(state.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi.as_f64();
                let m_new = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * gi;
                let v_new = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * gi * gi;
                *mi = T::from_f64_lossy(m_new);
                *vi = T::from_f64_lossy(v_new);
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                let updated = w.as_f64() * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *w = T::from_f64_lossy(updated);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut state = AdamState::new();
        for _ in 0..5 {
            opt.step(&mut state, [&mut p], std::slice::from_ref(&g)).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_geometrically() {
        let opt = AdamW {
            lr: 1e-3,
            weight_decay: 1e-3,
            ..AdamW::default()
        };
        let mut p = Tensor::<f64>::new(&[2], vec![3.0, -4.0]).unwrap();
        let g = Tensor::<f64>::zeros(&[2]);
        let mut state = AdamState::new();
        opt.step(&mut state, [&mut p], std::slice::from_ref(&g)).unwrap();
        assert!((p.data()[0] - 3.0 * (1.0 - 1e-6)).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = Tensor::<f32>::scalar(0.0);
        let g = Tensor::<f32>::scalar(1.0);
        let mut state = AdamState::new();
        opt.step(&mut state, [&mut p], std::slice::from_ref(&g)).unwrap();
        assert!((p.item() as f64 + 1e-3).abs() < 1e-6);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let opt = AdamW::default();
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut state = AdamState::new();
        assert!(opt.step(&mut state, [&mut p], &[]).is_err());
    }
}
