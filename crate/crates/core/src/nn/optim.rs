use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are bound to parameter order.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter set changed");
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = T::from_f64_lossy(c.learning_rate * bc2.sqrt() / bc1);
        let eps = T::from_f64_lossy(c.eps * bc2.sqrt());
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            let grads = p.grad.data();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w -= lr * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("w", Tensor::<f64>::full(Shape::new(1, 1, 1, 2), 1.0));
        p.grad.data_mut().copy_from_slice(&[0.5, -3.0]);
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        opt.step(vec![&mut p]);
        // bias-corrected first step is lr * sign(g)
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] - 1.1).abs() < 1e-6);
    }
}
