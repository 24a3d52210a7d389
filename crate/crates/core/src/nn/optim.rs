use super::params::{ParamKind, ParamStore};
use crate::error::{GltError, Result};
use crate::scalar::Scalar;

/// Multiplies the learning rate by `factor` every `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub period: usize,
    pub factor: f64,
}

impl StepDecay {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        base * self.factor.powi((epoch / self.period) as i32)
    }
}

/// Adam with a step-decay schedule on the base learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: StepDecay,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr0: f64, schedule: StepDecay) -> Self {
        Adam {
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.schedule.rate(self.lr0, epoch)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, epoch: usize) -> Result<()> {
        for p in store.iter_mut() {
            if let Some(g) = &p.tensor.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(GltError::Numerical(format!("non-finite gradient in {}", p.name)));
                }
            }
        }
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate(epoch);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = p.tensor.grad.take() else { continue };
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn step_decay_halves_every_period() {
        let s = StepDecay { period: 25, factor: 0.5 };
        assert_eq!(s.rate(1e-4, 0), 1e-4);
        assert_eq!(s.rate(1e-4, 24), 1e-4);
        assert!((s.rate(1e-4, 26) - 5e-5).abs() < 1e-20);
        assert!((s.rate(1e-4, 79) - 1.25e-5).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), ParamKind::Trainable);
        let before = store.get(id).tensor.data().to_vec();
        let mut adam = Adam::new(1e-2, StepDecay { period: 25, factor: 0.5 });
        for _ in 0..5 {
            store.get_mut(id).tensor.accumulate_grad(&[0.0; 3]);
            adam.step(&mut store, 0).unwrap();
        }
        assert_eq!(store.get(id).tensor.data(), &before[..]);
        assert!(store.get(id).tensor.grad.is_none());
    }

    #[test]
    fn converges_on_quadratic() {
        // loss = (x − 3)², minimum at 3
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[1], &[0.0]).unwrap(), ParamKind::Trainable);
        let mut adam = Adam::new(0.1, StepDecay { period: 200, factor: 0.5 });
        for step in 0..500 {
            let x = store.get(id).tensor.data()[0];
            store.get_mut(id).tensor.accumulate_grad(&[2.0 * (x - 3.0)]);
            adam.step(&mut store, step / 100).unwrap();
        }
        assert!((store.get(id).tensor.data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("head.weight", Tensor::zeros(&[1]), ParamKind::Trainable);
        store.get_mut(id).tensor.accumulate_grad(&[f64::NAN]);
        let mut adam = Adam::new(1e-3, StepDecay { period: 25, factor: 0.5 });
        let err = adam.step(&mut store, 0).unwrap_err().to_string();
        assert!(err.contains("head.weight"), "{err}");
        assert_eq!(store.get(id).tensor.data(), &[0.0]);
    }
}
