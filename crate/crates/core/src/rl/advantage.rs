//! Generalized advantage estimation and the multi-critic advantage mix.

/// GAE over one environment's trajectory segment. `dones[t]` ends the episode after
/// step `t`, so nothing is bootstrapped across it; `last_value` bootstraps the end of
/// the segment. Returns `(advantages, value_targets)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae inputs differ in length");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, live) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 == n {
            (last_value, 1.0)
        } else {
            (values[t + 1], 1.0)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// `(sum_i w_i A_i - mu) / sigma` over the batch, with `sigma` floored at `1e-8`.
pub fn mix_advantages(advantages: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    assert_eq!(advantages.len(), weights.len(), "one weight per critic");
    let n = advantages.first().map_or(0, Vec::len);
    let mut mixed = vec![0.0; n];
    for (a, &w) in advantages.iter().zip(weights) {
        assert_eq!(a.len(), n, "advantage batches differ in length");
        for (m, x) in mixed.iter_mut().zip(a) {
            *m += w * x;
        }
    }
    if n == 0 {
        return mixed;
    }
    let mean = mixed.iter().sum::<f64>() / n as f64;
    let var = mixed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    mixed.iter_mut().for_each(|x| *x = (*x - mean) / std);
    mixed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_is_one_step_td() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 0.25, 0.125];
        let (a, _) = gae(&r, &v, &[false; 3], 4.0, 0.9, 0.0);
        assert_eq!(a[0], 1.0 + 0.9 * 0.25 - 0.5);
        assert_eq!(a[2], 3.0 + 0.9 * 4.0 - 0.125);
    }

    #[test]
    fn mixed_moments() {
        let a = vec![vec![1.0, 2.0, 3.0, 5.0], vec![0.0, -1.0, 4.0, 2.0]];
        let m = mix_advantages(&a, &[3.0, 1.5]);
        let mean: f64 = m.iter().sum::<f64>() / 4.0;
        let var: f64 = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-12);
    }
}
