//! Adam with bias correction.
//!
//! Tensors are immutable once built, so a step replaces each parameter
//! handle with a fresh leaf holding the updated values. Moment buffers are
//! keyed by position in the parameter list, which the model keeps in a
//! fixed order.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct Adam<E: Scalar> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: E) -> Self {
        Adam {
            lr,
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            eps: E::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`, in order. Every parameter must carry an
    /// accumulated gradient; a missing one is a wiring bug upstream.
    /// Clears the gradient of every parameter by replacement.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![E::zero(); p.shape().numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = E::one() - self.beta1.powi(t);
        let bc2 = E::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().ok_or_else(|| {
                Error::Contract(format!("parameter {} has no gradient before adam step", i))
            })?;
            if grad.len() != p.shape().numel() {
                return Err(Error::Contract("gradient length mismatch".into()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut new_data = p.data().to_vec();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (E::one() - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (E::one() - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                new_data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            **p = Tensor::param(p.shape(), new_data)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mul, scale, sub, sum_all, Shape};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, step 1 is exactly lr * sign(g) for any g != 0.
        let mut p = Tensor::<f64>::param(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let loss = sum_all(&scale(&p, 3.0));
        loss.backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        let eps_pull = 1e-9; // optimizer eps shifts the unit step slightly
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < eps_pull + 1e-12);
        assert!((p.data()[1] - (-2.0 - 0.1)).abs() < eps_pull + 1e-12);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut p = Tensor::<f32>::param(Shape::scalar(), vec![5.0]).unwrap();
        let mut opt = Adam::new(0.1);
        assert!(matches!(opt.step(&mut [&mut p]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::<f32>::param(Shape::scalar(), vec![5.0]).unwrap();
        let loss = sum_all(&scale(&p, 0.0));
        loss.backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[5.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = sum((w - c)^2): optimum at c, gradient 2(w - c).
        let c = Tensor::<f64>::constant(Shape::new(1, 1, 1, 2), vec![0.3, -1.7]).unwrap();
        let mut w = Tensor::<f64>::param(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..200 {
            let d = sub(&w, &c).unwrap();
            let loss = sum_all(&mul(&d, &d).unwrap());
            loss.backward().unwrap();
            opt.step(&mut [&mut w]).unwrap();
        }
        let gnorm =
            ((2.0 * (w.data()[0] - 0.3)).powi(2) + (2.0 * (w.data()[1] + 1.7)).powi(2)).sqrt();
        assert!(gnorm < 1e-3, "|grad| = {gnorm}");
    }
}
