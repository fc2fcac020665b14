//! Central finite-difference gradient checking in 64-bit precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per-parameter `(name, relative error, analytic norm)`.
    pub entries: Vec<(String, f64, f64)>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Compares backprop gradients of the scalar built by `f` against central differences.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)` using 2-norms over the checked
/// entries of each parameter. At most `max_entries` entries per parameter are probed,
/// evenly strided, to keep large networks affordable.
pub fn check<F>(store: &mut ParamStore<f64>, step: f64, max_entries: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    g.backward(root)?;
    store.zero_grad();
    store.accumulate(&g);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        Ok(g.value(root).item())
    };
    for id in ids {
        let analytic = store.grad(id).to_vec();
        let n = analytic.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            diff += (numeric - analytic[i]).powi(2);
            an += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        let (an, nn) = (an.sqrt(), nn.sqrt());
        let rel = diff.sqrt() / an.max(nn).max(1e-12);
        entries.push((store.name(id).to_string(), rel, an));
    }
    Ok(GradReport { entries })
}
