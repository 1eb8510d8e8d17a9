use super::params::ParamStore;
use crate::error::{invalid, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &f64> {
        self.v.iter().flatten()
    }

    /// One update of every trainable entry. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = entry.tensor.data_mut();
            match &grads[i] {
                Some(g) => {
                    for j in 0..data.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                    }
                }
                None => {
                    for j in 0..data.len() {
                        m[j] *= self.beta1;
                        v[j] *= self.beta2;
                        data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
