use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One parameter handed to [`Adam::step`]. `slot` keys the moment state.
pub struct AdamSlot<'a> {
    pub slot: usize,
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

/// Adam with bias correction; moments start at zero.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, slots: &mut [AdamSlot<'_>]) -> Result<()> {
        for s in slots.iter() {
            if s.grad.shape() != s.value.shape() {
                return Err(TensorError::shape(
                    "adam_step",
                    s.value.shape(),
                    s.grad.shape(),
                ));
            }
            if !s.grad.is_finite() {
                return Err(TensorError::NonFiniteGradient(s.name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for s in slots.iter_mut() {
            if self.moments.len() <= s.slot {
                self.moments.resize(s.slot + 1, None);
            }
            let n = s.value.numel();
            let (m, v) = self.moments[s.slot].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &g), m), v) in s
                .value
                .data_mut()
                .iter_mut()
                .zip(s.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
