//! Probability annealing selection between ground-truth and estimated priors.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasSchedule {
    /// Iterations over which `p` rises from 0 to 1. Zero means `p = 1` throughout.
    pub total: usize,
}

impl PasSchedule {
    pub fn new(total: usize) -> Self {
        Self { total }
    }

    /// Probability of feeding the estimate at iteration `t`.
    pub fn p(&self, t: usize) -> f64 {
        if t >= self.total {
            return 1.0;
        }
        1.0 - (std::f64::consts::PI * t as f64 / (2.0 * self.total as f64)).cos()
    }
}

/// True when the estimate is selected: `u < p` with `u ~ U(0, 1)`.
pub fn pas_select<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.gen::<f64>() < p
}
