use std::collections::BTreeMap;

use crate::tensor::{Float, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

/// Adam with bias correction. State is keyed by parameter name; a parameter
/// whose gradient is `None` is left untouched and its step count does not advance.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: Option<&Tensor<T>>) {
        let Some(grad) = grad else { return };
        assert_eq!(param.shape(), grad.shape(), "adam: gradient shape for `{name}`");
        let n = param.len();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            steps: 0,
        });
        st.steps += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(st.steps));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(st.steps));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
}
