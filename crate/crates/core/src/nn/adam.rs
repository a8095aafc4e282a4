use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::tensor::Real;

pub const DEFAULT_LR: f64 = 5e-4;

/// First/second moment buffers and hyperparameters of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments for every parameter of `store`.
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.params().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Self { step_count: 0, m: zeros.clone(), v: zeros, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update using the gradients held in `store`.
    /// Parameters without a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.num_params() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.num_params()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for ((param, m), v) in store.params_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != param.len() {
                return Err(Error::Shape("optimizer moment length mismatch".into()));
            }
            let Some(grad) = param.grad().map(<[T]>::to_vec) else { continue };
            for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("w", Tensor::from_f64(&[1], &[w]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.25);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        s.param_mut(crate::nn::ParamId(0)).grad_mut();
        adam.step(&mut s).unwrap();
        assert_eq!(s.params().next().unwrap().1.data(), &[0.25]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02] {
            let mut s = scalar_store(1.0);
            let mut adam = AdamState::new(&s, 0.01);
            s.param_mut(crate::nn::ParamId(0)).set_grad(vec![g]);
            adam.step(&mut s).unwrap();
            let w = s.params().next().unwrap().1.data()[0];
            // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-12);
            assert!(((1.0 - w) - 0.01 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(&s, 0.1);
        let id = crate::nn::ParamId(0);
        for _ in 0..200 {
            let w = s.param(id).data()[0];
            s.param_mut(id).set_grad(vec![2.0 * w]);
            adam.step(&mut s).unwrap();
        }
        assert!(s.param(id).data()[0].abs() < 0.1);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let s = scalar_store(1.0);
        let mut adam = AdamState::new(&s, 0.1);
        let mut other = scalar_store(1.0);
        other.add_param("extra", Tensor::zeros(&[2]));
        assert!(adam.step(&mut other).is_err());
    }
}
