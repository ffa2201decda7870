//! Adam optimizer with bias correction and the step-decay schedule.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-parameter Adam accumulators.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
    pub step: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Optimizer hyperparameters. Defaults follow the training recipe:
/// beta1 = 0.9, beta2 = 0.999, base learning rate 1e-4 decayed to
/// nine-tenths every 10 epochs.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Learning rate after `epoch` full epochs: `base * 0.9^(epoch / 10)`.
pub fn scheduled_lr(base_lr: f64, epoch: u64) -> f64 {
    base_lr * 0.9f64.powi((epoch / 10) as i32)
}

/// One Adam update. `param` and `grad` must share a shape with the state.
pub fn adam_step<E: Element>(
    param: &mut Tensor<E>,
    grad: &Tensor<E>,
    state: &mut AdamState<E>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::shape(format!(
            "adam_step: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let md = state.m.data_mut();
    let vd = state.v.data_mut();
    let pd = param.data_mut();
    for ((p, (m, v)), &g) in pd.iter_mut().zip(md.iter_mut().zip(vd.iter_mut())).zip(grad.data()) {
        let g = g.to_f64();
        let mn = b1 * m.to_f64() + (1.0 - b1) * g;
        let vn = b2 * v.to_f64() + (1.0 - b2) * g * g;
        *m = E::from_f64(mn);
        *v = E::from_f64(vn);
        let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + cfg.epsilon);
        *p = E::from_f64(p.to_f64() - update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Tensor::<f64>::filled(&[3], 1.5);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[3]);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(p.data(), &[1.5; 3]);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // p=1, g=1, lr=0.1 -> p ~ 0.9 after bias correction
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[1]);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn schedule_decays_every_ten_epochs() {
        assert_eq!(scheduled_lr(1e-4, 0), 1e-4);
        assert_eq!(scheduled_lr(1e-4, 9), 1e-4);
        assert!((scheduled_lr(1e-4, 10) - 9e-5).abs() < 1e-15);
        assert!((scheduled_lr(1e-4, 25) - 8.1e-5).abs() < 1e-15);
    }

    #[test]
    fn uninitialized_state_shape_rejected() {
        let mut p = Tensor::<f64>::filled(&[3], 1.0);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[2]);
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1).is_err());
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let mut p = Tensor::<f64>::filled(&[4], 0.0);
        let mut st = AdamState::new(&[4]);
        let cfg = AdamConfig::default();
        for i in 0..20 {
            let g = Tensor::filled(&[4], if i % 2 == 0 { 1.0 } else { -2.0 });
            adam_step(&mut p, &g, &mut st, &cfg, 0.01).unwrap();
            assert!(st.v.data().iter().all(|&v| v >= 0.0));
        }
    }
}
