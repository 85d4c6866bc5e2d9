//! AdamW with decoupled weight decay, plus the warmup/cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW state for a fixed list of parameter tensors. The moment buffers
/// are positional: call [`AdamW::step`] with parameters in the same order
/// every time.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(param_sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `params` and `grads` must align with the sizes the
    /// optimizer was built with.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.first_moment.len(), "parameter count changed");
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            assert_eq!(param.numel(), grad.len(), "gradient size mismatch");
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                param.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps)
                    + self.weight_decay * param.data[i]);
            }
        }
    }
}

/// Learning rate at `step`: linear ramp 0 -> base_lr over the warmup
/// epochs, then cosine decay to 0 at `total_epochs`.
pub fn lr_schedule(
    step: usize,
    warmup_epochs: usize,
    total_epochs: usize,
    steps_per_epoch: usize,
    base_lr: f64,
) -> Result<f64> {
    if warmup_epochs >= total_epochs {
        return Err(Error::InvalidSchedule {
            warmup_epochs,
            total_epochs,
        });
    }
    let warmup_steps = warmup_epochs * steps_per_epoch;
    let total_steps = total_epochs * steps_per_epoch;
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![1, 3], vec![1.0, -2.0, 3.0]);
        let before = p.data.clone();
        let mut opt = AdamW::new(&[3], 0.0);
        opt.step(0.1, &mut [&mut p], &[vec![0.0; 3]]);
        assert_eq!(p.data, before);
    }

    #[test]
    fn single_step_descends_on_quadratic() {
        // f(x) = x^2 at x=1: gradient 2, one step must shrink |x|.
        let mut p = Tensor::from_vec(vec![1, 1], vec![1.0]);
        let mut opt = AdamW::new(&[1], 0.0);
        opt.step(0.1, &mut [&mut p], &[vec![2.0]]);
        assert!(p.data[0].abs() < 1.0);
    }

    #[test]
    fn two_hundred_steps_minimize_convex_quadratic() {
        // f(x, y) = 2 x^2 + 0.5 y^2, minimum 0 at the origin.
        let mut p = Tensor::from_vec(vec![1, 2], vec![1.5, -2.0]);
        let mut opt = AdamW::new(&[2], 0.0);
        for _ in 0..200 {
            let g = vec![4.0 * p.data[0], 1.0 * p.data[1]];
            opt.step(0.05, &mut [&mut p], &[g]);
        }
        let loss = 2.0 * p.data[0] * p.data[0] + 0.5 * p.data[1] * p.data[1];
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn schedule_hits_base_lr_at_end_of_warmup() {
        let lr = lr_schedule(20 * 10, 20, 150, 10, 2.5e-4).unwrap();
        assert_eq!(lr, 2.5e-4);
    }

    #[test]
    fn schedule_decays_to_zero() {
        let lr = lr_schedule(150 * 10, 20, 150, 10, 2.5e-4).unwrap();
        assert!(lr.abs() < 1e-12);
    }

    #[test]
    fn schedule_midpoint_is_half() {
        // midpoint of the decay span (warmup 20, total 150 -> step epoch 85)
        let lr = lr_schedule(85 * 10, 20, 150, 10, 2.0e-4).unwrap();
        assert!((lr - 1.0e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_ramps_linearly_during_warmup() {
        let lr = lr_schedule(5, 10, 20, 1, 1.0).unwrap();
        assert!((lr - 0.5).abs() < 1e-15);
        assert_eq!(lr_schedule(0, 10, 20, 1, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn schedule_rejects_warmup_not_shorter_than_total() {
        assert!(matches!(
            lr_schedule(0, 30, 30, 10, 1e-3),
            Err(Error::InvalidSchedule { .. })
        ));
        assert!(matches!(
            lr_schedule(0, 31, 30, 10, 1e-3),
            Err(Error::InvalidSchedule { .. })
        ));
    }
}
