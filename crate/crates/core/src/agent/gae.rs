use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Generalized advantage estimation over time-major `[T][num_envs]`
/// arrays. `bootstrap` holds `V(s_T)` per env. Returns
/// `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let e = bootstrap.len();
    let n = rewards.len();
    if e == 0 || n % e != 0 || values.len() != n || dones.len() != n {
        return Err(Error::shape("gae", &[n, e], &[values.len(), dones.len()]));
    }
    let steps = n / e;
    let mut adv = vec![0.0; n];
    for env in 0..e {
        let mut next_value = bootstrap[env];
        let mut next_adv = 0.0;
        for t in (0..steps).rev() {
            let i = t * e + env;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * live - values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gamma_is_one_step_td() {
        let r = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.4, 2.0];
        let (a, ret) = gae(&r, &v, &[false; 4], &[9.0, 9.0], 0.0, 0.95).unwrap();
        for i in 0..4 {
            assert_eq!(a[i], r[i] - v[i]);
            assert_eq!(ret[i], a[i] + v[i]);
        }
    }

    #[test]
    fn terminal_single_step() {
        let (a, _) = gae(&[2.0], &[0.5], &[true], &[100.0], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.5]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(gae(&[1.0, 2.0, 3.0], &[0.0; 3], &[false; 3], &[0.0, 0.0], 0.9, 0.9).is_err());
    }
}
