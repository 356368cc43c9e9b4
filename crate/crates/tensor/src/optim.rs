use std::collections::BTreeMap;

use crate::{Gradients, ParamSet, Scalar};

/// Adam with bias correction. Moments are keyed by parameter name.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

/// Serializable optimizer state.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter in `params` that has a gradient.
    pub fn step(&mut self, params: &ParamSet<F>, grads: &Gradients<F>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::cst(self.beta1), F::cst(self.beta2));
        let step_size = F::cst(self.lr * bc2.sqrt() / bc1);
        let eps_hat = F::cst(self.eps * bc2.sqrt());
        for p in params.iter().filter(|p| p.is_trainable()) {
            let Some(g) = p.grad(grads) else { continue };
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![F::zero(); n], vec![F::zero(); n]));
            let mut w = p.to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                w[i] = w[i] - step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
            p.set(w);
        }
    }

    pub fn export(&self) -> AdamState {
        let to32 = |v: &Vec<F>| v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
        AdamState {
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|(k, (m, v))| (k.clone(), to32(m), to32(v)))
                .collect(),
        }
    }

    pub fn import(&mut self, state: &AdamState) {
        let from32 = |v: &Vec<f32>| v.iter().map(|&x| F::cst(x as f64)).collect();
        self.step = state.step;
        self.moments = state
            .moments
            .iter()
            .map(|(k, m, v)| (k.clone(), (from32(m), from32(v))))
            .collect();
    }
}
