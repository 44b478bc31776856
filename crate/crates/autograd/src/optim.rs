use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-9 }
    }
}

/// Adam with bias correction. Frozen parameters are skipped.
///
/// Moments and updated parameters are rounded through `f32` after every step,
/// so a saved-and-restored optimizer continues bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved state.
    pub fn restore(config: AdamConfig, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Self {
        assert_eq!(m.len(), v.len(), "moment list length mismatch");
        Adam { config, m, v, t }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        assert_eq!(self.m.len(), store.len(), "optimizer built for a different store");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {}", i);
            for (((pv, mv), vv), &gv) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mv = (beta1 * *mv + (1.0 - beta1) * gv) as f32 as f64;
                *vv = (beta2 * *vv + (1.0 - beta2) * gv * gv) as f32 as f64;
                let update = lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                *pv = (*pv - update) as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_fn(&[3], |i| i as f64 * 0.5));
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::zeros(&[3])]);
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let cfg = AdamConfig { lr: 0.125, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store, &[Tensor::new(&[2], vec![3.0, -0.5])]);
        let w = store.get(id).data();
        assert!((w[0] - 0.875).abs() < 1e-6);
        assert!((w[1] + 0.875).abs() < 1e-6);
    }
}
