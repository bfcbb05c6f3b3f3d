//! Adaptive-moment first-order optimizer.

use std::collections::BTreeMap;

use crate::autograd::Gradients;
use crate::nn::Module;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub steps: u64,
}

/// Optimizer state keyed by qualified parameter name, so it survives
/// checkpointing independently of in-process parameter ids.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub state: BTreeMap<String, Moments<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    /// Update every parameter of `module` that received a gradient. Parameters
    /// without one (unused or frozen this step) keep their value and moments.
    pub fn step(&mut self, module: &mut dyn Module<F>, prefix: &str, grads: &Gradients<F>) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let (b1, b2) = (F::lit(beta1), F::lit(beta2));
        let state = &mut self.state;
        module.visit_mut(prefix, &mut |name, p| {
            let Some(g) = grads.param(p) else { return };
            let entry = state.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value().shape()),
                v: Tensor::zeros(p.value().shape()),
                steps: 0,
            });
            entry.steps += 1;
            let t = entry.steps as i32;
            let step = F::lit(lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)));
            let eps_hat = F::lit(eps * (1.0 - beta2.powi(t)).sqrt());
            let (m, v) = (entry.m.data_mut(), entry.v.data_mut());
            for (((w, &gi), mi), vi) in p.value_mut().data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps_hat);
            }
        });
    }
}
