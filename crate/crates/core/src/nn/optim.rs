//! Adam over the trainable blocks of a [`ParamStore`].

use super::params::{Grads, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    /// Groups eligible for update; `None` updates every trainable block.
    groups: Option<Vec<ParamGroup>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam {
            config,
            groups: None,
            m: store.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect(),
            v: store.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect(),
            step: 0,
        }
    }

    pub fn restricted_to(mut self, groups: &[ParamGroup]) -> Self {
        self.groups = Some(groups.to_vec());
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, block) in store.blocks_mut().iter_mut().enumerate() {
            if !block.trainable {
                continue;
            }
            if let Some(groups) = &self.groups {
                if !groups.contains(&block.group) {
                    continue;
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((p, &g), (mi, vi)) in block
                .data
                .iter_mut()
                .zip(&grads.0[i])
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g * scale;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", &[1], vec![x], ParamGroup::Classifier, true);
        s
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let g = Grads::zeros_like(&s);
        for _ in 0..10 {
            adam.step(&mut s, &g);
        }
        assert_eq!(s.get(0), &[1.5]);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let mut g = Grads::zeros_like(&s);
        g.block_mut(0)[0] = 0.7;
        let mut prev = 0.0;
        for _ in 0..100 {
            adam.step(&mut s, &g);
            assert!(s.get(0)[0] < prev);
            prev = s.get(0)[0];
        }
    }

    #[test]
    fn first_step_on_quadratic_matches_hand_value() {
        // f(x) = (x - 3)², x0 = 1: g = -4, m̂ = -4, v̂ = 16, step = lr·(-4)/(4 + eps).
        let mut s = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(&s, cfg);
        let mut g = Grads::zeros_like(&s);
        g.block_mut(0)[0] = 2.0 * (1.0 - 3.0);
        adam.step(&mut s, &g);
        let want = 1.0 - 0.1 * (-4.0) / (4.0 + 1e-8);
        assert_eq!(s.get(0)[0], want);
    }

    #[test]
    fn group_filter_and_frozen_blocks() {
        let mut s = ParamStore::new();
        s.add("a", &[1], vec![1.0], ParamGroup::Extractor, true);
        s.add("b", &[1], vec![1.0], ParamGroup::Classifier, true);
        s.add("c", &[1], vec![1.0], ParamGroup::Classifier, false);
        let mut adam = Adam::new(&s, AdamConfig::default()).restricted_to(&[ParamGroup::Classifier]);
        let mut g = Grads::zeros_like(&s);
        for i in 0..3 {
            g.block_mut(i)[0] = 1.0;
        }
        adam.step(&mut s, &g);
        assert_eq!(s.get(0), &[1.0]);
        assert!(s.get(1)[0] < 1.0);
        assert_eq!(s.get(2), &[1.0]);
    }
}
