use crate::params::ParamStore;
use crate::scalar::Real;
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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed list of slots. Slot `i` keeps its own moments, so the
/// same optimizer drives either a [`ParamStore`] or loose tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn ensure(&mut self, slot: usize, len: usize) {
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
            self.steps.push(0);
        }
        if self.m[slot].len() != len {
            self.m[slot] = vec![T::zero(); len];
            self.v[slot] = vec![T::zero(); len];
            self.steps[slot] = 0;
        }
    }

    /// One update of `param` in place with learning rate `lr`.
    pub fn update_slot(&mut self, slot: usize, param: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(param.len(), grad.len(), "adam: gradient length mismatch");
        self.ensure(slot, param.len());
        self.steps[slot] += 1;
        let t = self.steps[slot] as i32;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let step = T::lit(lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let eps = T::lit(eps * bc2.sqrt());
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + ob1 * g;
            v[i] = b2 * v[i] + ob2 * g * g;
            param[i] -= step * m[i] / (v[i].sqrt() + eps);
        }
    }

    /// Update every parameter that received a gradient, honouring `lr_mult`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(
            grads.len(),
            store.len(),
            "adam: one gradient slot per parameter"
        );
        let lr = self.config.lr;
        for (slot, (p, g)) in store.iter_mut().zip(grads).enumerate() {
            if let Some(g) = g {
                let lr = lr * p.lr_mult;
                self.update_slot(slot, p.value.data_mut(), g.data(), lr);
            }
        }
    }

    /// Moments of every slot, for checkpointing.
    pub fn state(&self) -> (Vec<Vec<T>>, Vec<Vec<T>>, Vec<u64>) {
        (self.m.clone(), self.v.clone(), self.steps.clone())
    }

    pub fn restore(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, steps: Vec<u64>) {
        self.m = m;
        self.v = v;
        self.steps = steps;
    }
}
