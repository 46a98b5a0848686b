use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdConfig {
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// Heavy-ball SGD with weight decay folded into the gradient:
///
/// ```text
/// v <- momentum * v - lr * (grad + weight_decay * value)
/// value <- value + v
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, store: &ParamStore) -> Result<Self> {
        if config.lr <= 0.0 || !config.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", config.lr)));
        }
        let velocity = store
            .iter()
            .map(|p| Tensor::from_parts(p.value.shape().to_vec(), vec![0.0; p.value.len()], Precision::F64))
            .collect();
        Ok(Sgd { config, velocity })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("velocity state does not match the parameter set"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::dim("optimizer was built for a different parameter set"));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if p.frozen {
                continue;
            }
            let precision = p.value.precision();
            let values = p.value.data_mut();
            for ((x, vel), g) in values.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = momentum * *vel - lr * (g + weight_decay * *x);
                *x = precision.round(*x + *vel);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamGroup;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Other, Tensor::with_precision(&[1], vec![value], Precision::F64).unwrap());
        store.get_mut(id).grad.data_mut()[0] = grad;
        store
    }

    #[test]
    fn plain_step_descends_by_lr_times_grad() {
        let mut store = store_with(1.0, 2.0);
        let mut sgd = Sgd::new(SgdConfig::new(0.1, 0.0, 0.0), &store).unwrap();
        sgd.step(&mut store).unwrap();
        assert!((store.iter().next().unwrap().value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut store = store_with(0.0, 1.0);
        let mut sgd = Sgd::new(SgdConfig::new(0.1, 0.9, 0.0), &store).unwrap();
        sgd.step(&mut store).unwrap();
        let after_one = store.iter().next().unwrap().value.data()[0];
        sgd.step(&mut store).unwrap();
        let after_two = store.iter().next().unwrap().value.data()[0];
        assert!((after_one - (-0.1)).abs() < 1e-15);
        assert!((after_two - after_one - (-0.19)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut store = store_with(0.3, 5.0);
        store.set_trainable(&[]);
        let mut sgd = Sgd::new(SgdConfig::new(0.1, 0.9, 0.0005), &store).unwrap();
        let before = store.iter().next().unwrap().value.clone();
        for _ in 0..3 {
            sgd.step(&mut store).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().value, before);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut store = store_with(0.7, 0.0);
        let mut sgd = Sgd::new(SgdConfig::new(0.5, 0.9, 0.0), &store).unwrap();
        sgd.step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().value.data(), &[0.7]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let store = store_with(0.0, 0.0);
        assert!(Sgd::new(SgdConfig::new(0.0, 0.9, 0.0), &store).is_err());
    }
}
