use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig<T: Scalar = f32> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |v: T| v > T::zero() && v < T::one();
        if !(self.lr > T::zero()) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > T::zero()) {
            return Err(Error::contract(
                "adam_step",
                format!(
                    "need lr > 0, betas in (0,1), eps > 0; got lr={} betas=({}, {}) eps={}",
                    self.lr, self.beta1, self.beta2, self.eps
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u32,
}

/// First and second moment estimates, one slot per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    slots: Vec<Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { slots: Vec::new() }
    }

    /// Steps taken by parameter `i`.
    pub fn steps(&self, i: usize) -> u32 {
        self.slots.get(i).map_or(0, |s| s.step)
    }
}

/// One Adam update of every parameter from its populated grad, then zeroes
/// the grads.
///
/// A parameter whose grad is identically zero is left untouched and its
/// moments are not advanced.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig<T>,
) -> Result<()> {
    cfg.validate()?;
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::contract("adam_step", format!("parameter {i} has no gradient")));
        }
        if let Some(slot) = state.slots.get(i) {
            if slot.m.len() != p.numel() {
                return Err(Error::shape("adam_step", &[slot.m.len()], p.shape()));
            }
        }
    }
    if state.slots.len() > params.len() {
        return Err(Error::contract(
            "adam_step",
            format!("state tracks {} params, given {}", state.slots.len(), params.len()),
        ));
    }
    while state.slots.len() < params.len() {
        let n = params[state.slots.len()].numel();
        state.slots.push(Moments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        });
    }

    for (p, slot) in params.iter_mut().zip(&mut state.slots) {
        let grad = p.take_grad().expect("checked above");
        if grad.iter().all(|&g| g == T::zero()) {
            p.set_grad(Some(grad))?;
            continue;
        }
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = T::one() - cfg.beta1.powi(t);
        let bc2 = T::one() - cfg.beta2.powi(t);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(&mut slot.m).zip(&mut slot.v) {
            *m = cfg.beta1 * *m + (T::one() - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (T::one() - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w = *w - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        let mut grad = grad;
        grad.iter_mut().for_each(|g| *g = T::zero());
        p.set_grad(Some(grad))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap();
        t.set_grad(Some(vec![g])).unwrap();
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let mut p = param(1.0, 1.0);
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected as f32).abs() < 1e-7);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(p.grad(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_grad_leaves_params_unchanged_with_any_state() {
        let mut p = param(2.5, 0.7);
        let mut st = AdamState::new();
        let cfg = AdamConfig::with_lr(0.05);
        adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
        let before = p.clone();
        p.set_grad(Some(vec![0.0])).unwrap();
        adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(st.steps(0), 1);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // f(x) = (x - 3)², grad 2(x - 3).
        let mut p = param(0.0, 0.0);
        let mut st = AdamState::new();
        let cfg = AdamConfig::with_lr(0.1);
        let loss = |x: f32| (x - 3.0) * (x - 3.0);
        let mut prev = loss(p.data()[0]);
        for _ in 0..2 {
            let x = p.data()[0];
            p.set_grad(Some(vec![2.0 * (x - 3.0)])).unwrap();
            adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
            let now = loss(p.data()[0]);
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut p = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let err = adam_step(&mut [&mut p], &mut AdamState::new(), &AdamConfig::with_lr(0.1)).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }
}
