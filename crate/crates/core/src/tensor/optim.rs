use std::collections::HashSet;

use super::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are allocated lazily
/// and follow the store's parameter order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    no_decay: HashSet<ParamId>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            no_decay: HashSet::new(),
        }
    }

    /// Exempts `ids` from weight decay.
    pub fn without_decay(mut self, ids: impl IntoIterator<Item = ParamId>) -> Self {
        self.no_decay.extend(ids);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` using each tensor's `grad` buffer
    /// (absent buffers count as zero gradients).
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{name}` at element {pos}"
                    )));
                }
            }
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let t = params.get_mut(id);
            let grad = t.grad.take();
            let decay = if self.no_decay.contains(&id) { T::one() } else { decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                *p *= decay;
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr_t * mhat / (vhat.sqrt() + eps);
            }
            t.grad = grad;
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|(_, _, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(T::lit(max_norm / norm));
    }
    norm
}
