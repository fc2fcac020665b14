use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::real::Real;

/// Adam with bias correction. Parameters that received no gradient since the last
/// `zero_grad` are skipped entirely, moments included.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>, lr: f64) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.value(id).numel()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.touched(id) {
                continue;
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let grad: Vec<f64> = store.grad(id).iter().map(|g| g.f64()).collect();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), m), v) in store.value_mut(id).data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = T::of(w.f64() - update);
            }
        }
        store.updates += 1;
    }
}
