//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::diffcore::param::Parameter;
use crate::diffcore::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor4,
    pub v: Tensor4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Moment buffers keyed by parameter id, created lazily on first update.
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every trainable parameter, after which
    /// the gradient accumulators are cleared. Fails without touching any
    /// parameter if a trainable one has no gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().filter(|p| p.trainable).collect();
        for p in &params {
            match &p.grad {
                None => return Err(Error::MissingGrad(p.id.clone())),
                Some(g) => p.tensor.expect_same_shape("adam_step", g)?,
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            let shape = p.tensor.shape();
            let mom = self.moments.entry(p.id.clone()).or_insert_with(|| Moments {
                m: Tensor4::zeros(shape),
                v: Tensor4::zeros(shape),
            });
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (i, (theta, &g)) in p.tensor.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.epsilon);
                *theta = (*theta as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Shape;

    fn param(value: f32, grad: Option<f32>) -> Parameter {
        let mut p = Parameter::new("w", Tensor4::scalar(value), true);
        p.grad = grad.map(Tensor4::scalar);
        p
    }

    #[test]
    fn single_step_from_unit_gradient() {
        // m_hat = v_hat = 1, so the update is lr / (1 + eps).
        let mut p = param(1.0, Some(1.0));
        let mut adam = AdamState::new(0.01, 0.5, 0.999, 1e-8);
        adam.step([&mut p]).unwrap();
        assert!((p.tensor.data()[0] - 0.99).abs() < 1e-7);
        assert_eq!(adam.step, 1);
        assert!(p.grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = param(0.25, Some(0.0));
        let mut adam = AdamState::new(2e-4, 0.5, 0.999, 1e-8);
        adam.step([&mut p]).unwrap();
        assert_eq!(p.tensor.data()[0], 0.25);
        assert_eq!(adam.moments["w"].m.data()[0], 0.0);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let lr = 1e-3;
        let mut p = param(0.0, None);
        let mut adam = AdamState::new(lr, 0.5, 0.999, 1e-8);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.tensor.data()[0];
            p.grad = Some(Tensor4::scalar(-3.0));
            adam.step([&mut p]).unwrap();
            last = p.tensor.data()[0] - before;
        }
        // Moving opposite the (negative) gradient by lr per step.
        assert!((last as f64 - lr).abs() < 1e-5, "{last}");
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut a = param(1.0, Some(1.0));
        let mut b = Parameter::new("disc/head/bias", Tensor4::zeros(Shape::SCALAR), true);
        let mut adam = AdamState::new(0.1, 0.5, 0.999, 1e-8);
        let err = adam.step([&mut a, &mut b]).unwrap_err();
        assert!(err.to_string().contains("disc/head/bias"));
        assert_eq!(a.tensor.data()[0], 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut frozen = Parameter::new("running_mean", Tensor4::scalar(3.0), false);
        let mut adam = AdamState::new(0.1, 0.5, 0.999, 1e-8);
        adam.step([&mut frozen]).unwrap();
        assert_eq!(frozen.tensor.data()[0], 3.0);
    }
}
