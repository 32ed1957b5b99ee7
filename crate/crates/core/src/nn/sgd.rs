use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// SGD with classical momentum and L2 weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - learning_rate * v
/// ```
///
/// Gradients are left untouched; callers zero them between steps.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
            ..
        } = self.config;
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for ((_, tensor), velocity) in params.iter_mut().zip(&mut self.velocity) {
            if !tensor.requires_grad() {
                continue;
            }
            let (grad, data) = tensor.grad_and_data_mut();
            for (i, (p, v)) in data.iter_mut().zip(velocity.iter_mut()).enumerate() {
                let g = grad.map_or(0.0, |g| g[i]);
                *v = momentum * *v + g + weight_decay * *p;
                *p -= learning_rate * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[1], vec![value]).unwrap());
        store.get_mut(id).accumulate_grad(&[grad]);
        store
    }

    fn value(store: &ParamStore) -> f64 {
        store.iter().next().unwrap().1.data()[0]
    }

    #[test]
    fn plain_step() {
        let mut store = single(1.0, 2.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        })
        .unwrap();
        sgd.step(&mut store);
        assert!((value(&store) - 0.8).abs() < 1e-15);
        // gradient untouched
        assert_eq!(store.iter().next().unwrap().1.grad().unwrap(), &[2.0]);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = single(0.37, 0.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        })
        .unwrap();
        sgd.step(&mut store);
        assert_eq!(value(&store), 0.37);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut store = single(0.0, 1.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        })
        .unwrap();
        sgd.step(&mut store);
        assert!((value(&store) + 0.1).abs() < 1e-15);
        sgd.step(&mut store);
        assert!((value(&store) + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut store = single(2.0, 0.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
            seed: 0,
        })
        .unwrap();
        sgd.step(&mut store);
        assert!((value(&store) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let bad = [
            SgdConfig {
                learning_rate: 0.0,
                ..SgdConfig::default()
            },
            SgdConfig {
                momentum: 1.0,
                ..SgdConfig::default()
            },
            SgdConfig {
                weight_decay: -1.0,
                ..SgdConfig::default()
            },
        ];
        for cfg in bad {
            assert!(Sgd::new(cfg).is_err());
        }
    }
}
