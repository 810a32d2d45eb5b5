mod support;

use std::sync::Arc;

use curio_core::agent::{gae, ppo_terms, PolicyNet, PpoConfig};
use curio_core::diagnostics::{obs_distance_matrix, pairwise_correlation, reward_diff_matrix, PairwiseMatrix, ProbeSet};
use curio_core::diff::Tensor;
use curio_core::embed::{Embedder, RawPixels};
use curio_core::env::EnvConfig;
use curio_core::intrinsic::{CuriosityConfig, CuriosityModule, Variant};
use curio_core::pretrain::Backbone;
use curio_core::stats::RunningMeanStd;
use rand::Rng;
use support::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn gae_matches_explicit_sum() {
    for case in 0..50u64 {
        let mut r = rng(case);
        let e = r.random_range(1..4usize);
        let t = r.random_range(1..30usize);
        let n = e * t;
        let rewards = uniform(&mut r, n, -1.0, 1.0);
        let values = uniform(&mut r, n, -2.0, 2.0);
        let dones: Vec<bool> = (0..n).map(|_| r.random_bool(0.15)).collect();
        let boot = uniform(&mut r, e, -2.0, 2.0);
        let (gamma, lambda) = (r.random_range(0.8..1.0), r.random_range(0.0..1.0));
        let (adv, ret) = gae(&rewards, &values, &dones, &boot, gamma, lambda).unwrap();
        let want = gae_oracle(&rewards, &values, &dones, &boot, gamma, lambda);
        for i in 0..n {
            assert!(close(adv[i], want[i], 1e-12), "case {case} i {i}: {} vs {}", adv[i], want[i]);
            assert_eq!(ret[i], adv[i] + values[i]);
        }
    }
}

#[test]
fn pearson_matches_textbook_formula() {
    for case in 0..50u64 {
        let mut r = rng(100 + case);
        let k = r.random_range(3..20usize);
        let a = reward_diff_matrix(&uniform(&mut r, k, 0.0, 3.0)).unwrap();
        let b = PairwiseMatrix::from_fn(k, |i, j| if i == j { 0.0 } else { ((i * 7 + j * 7) % 11) as f64 + 0.5 });
        let got = pairwise_correlation(&a, &b).unwrap();
        let want = pearson_oracle(&a.upper_triangle(), &b.upper_triangle());
        assert!(close(got, want, 1e-10), "{got} vs {want}");
    }
}

#[test]
fn pairwise_matrices_match_double_loops() {
    let mut r = rng(7);
    let rewards = uniform(&mut r, 12, -1.0, 4.0);
    let m = reward_diff_matrix(&rewards).unwrap();
    for (i, row) in reward_diff_oracle(&rewards).iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(m.get(i, j), *v);
        }
    }

    let env = EnvConfig::key_door();
    let probe = ProbeSet::sample(&env, 10, 3).unwrap();
    let d = obs_distance_matrix(&probe, &RawPixels).unwrap();
    let width = probe.observations().len() / 10;
    let rows: Vec<Vec<f64>> = probe.observations().data().chunks(width).map(<[f64]>::to_vec).collect();
    for (i, row) in distance_oracle(&rows).iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!(close(d.get(i, j), *v, 1e-12));
        }
    }
}

#[test]
fn running_moments_match_two_pass() {
    let mut r = rng(11);
    let xs: Vec<f64> = (0..1000).map(|_| 3.0 + 2.0 * r.random_range(-1.0..1.0)).collect();
    let mut rms = RunningMeanStd::scalar();
    let mut start = 0;
    while start < xs.len() {
        let end = (start + r.random_range(1..97)).min(xs.len());
        rms.update_scalar(&xs[start..end]).unwrap();
        start = end;
    }
    let (mean, var) = moments_oracle(&xs);
    assert_eq!(rms.count(), 1000.0);
    assert!(close(rms.mean()[0], mean, 1e-12));
    assert!(close(rms.var()[0], var, 1e-10));
}

#[test]
fn adam_matches_scalar_recursion() {
    let single = adam_library(0.5, &[0.3], 1e-3, 0.9, 0.999, 1e-8);
    assert!(close(single, adam_oracle(0.5, &[0.3], 1e-3, 0.9, 0.999, 1e-8), 1e-12));
    // first bias-corrected step moves by lr * g / (|g| + eps)
    assert!(close(single, 0.5 - 1e-3 * 0.3 / (0.3 + 1e-8), 1e-12));
    let gs = [0.3, -1.2, 0.05, 2.0, -0.7];
    let lib = adam_library(-1.0, &gs, 1e-2, 0.8, 0.99, 1e-5);
    assert!(close(lib, adam_oracle(-1.0, &gs, 1e-2, 0.8, 0.99, 1e-5), 1e-12));
}

#[test]
fn ppo_terms_match_straight_line_computation() {
    let env = EnvConfig::key_door();
    let policy = PolicyNet::new(env.obs_shape(), 5).unwrap();
    let probe = ProbeSet::sample(&env, 16, 1).unwrap();
    let obs = probe.observations();
    let (lp, values) = policy.evaluate(obs).unwrap();
    let mut r = rng(9);
    let actions: Vec<usize> = (0..16).map(|_| r.random_range(0..5)).collect();
    let old: Vec<f64> = actions
        .iter()
        .enumerate()
        .map(|(i, &a)| lp.data()[i * 5 + a] + r.random_range(-0.4..0.4))
        .collect();
    let adv = uniform(&mut r, 16, -1.0, 1.0);
    let ret = uniform(&mut r, 16, -1.0, 1.0);
    let cfg = PpoConfig::default();
    let t = ppo_terms(&policy, obs, &actions, &old, &adv, &ret, &cfg).unwrap();

    let (mut pl, mut vl, mut ent) = (0.0, 0.0, 0.0);
    for i in 0..16 {
        let row = &lp.data()[i * 5..(i + 1) * 5];
        let ratio = (row[actions[i]] - old[i]).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        pl -= (ratio * adv[i]).min(clipped * adv[i]);
        vl += 0.5 * (values.data()[i] - ret[i]).powi(2);
        ent -= row.iter().map(|l| l.exp() * l).sum::<f64>();
    }
    let (pl, vl, ent) = (pl / 16.0, vl / 16.0, ent / 16.0);
    assert!(close(t.policy_loss, pl, 1e-12));
    assert!(close(t.value_loss, vl, 1e-12));
    assert!(close(t.entropy, ent, 1e-12));
    assert!(close(t.total, pl + cfg.value_coef * vl - cfg.entropy_coef * ent, 1e-12));
}

fn probe_obs() -> Tensor {
    ProbeSet::sample(&EnvConfig::key_door(), 24, 4).unwrap().observations().clone()
}

#[test]
fn prediction_error_matches_two_pass() {
    let obs = probe_obs();
    let mut m = CuriosityModule::build(Variant::Rnd, 3, EnvConfig::key_door().obs_shape(), None, CuriosityConfig::default()).unwrap();
    m.update_obs_normalizer(&obs).unwrap();
    let raw = m.raw_rewards(&obs).unwrap();
    let x = m.net_inputs(&obs).unwrap();
    let (t, p) = (m.target().infer(&x).unwrap(), m.predictor().infer(&x).unwrap());
    let d = t.shape()[1];
    for i in 0..raw.len() {
        let want = (0..d).map(|j| (t.data()[i * d + j] - p.data()[i * d + j]).powi(2)).sum::<f64>() / d as f64;
        assert!(close(raw[i], want, 1e-12));
        assert!(raw[i] >= 0.0);
    }
}

#[test]
fn predictor_displacement_scales_with_multiplier() {
    let obs = probe_obs();
    let shape = EnvConfig::key_door().obs_shape();
    let cfg = CuriosityConfig::default();
    let displacement = |v: Variant| {
        let mut m = CuriosityModule::build(v, 8, shape, None, cfg).unwrap();
        m.update_obs_normalizer(&obs).unwrap();
        let before = m.predictor().clone();
        m.update_predictor(&obs).unwrap();
        before
            .params()
            .iter()
            .zip(m.predictor().params())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)))
            .sum::<f64>()
            .sqrt()
    };
    let ratio = displacement(Variant::RndLr) / displacement(Variant::Rnd);
    assert!((0.009..=0.011).contains(&ratio), "ratio {ratio}");
}

#[test]
fn prend_scores_backbone_features() {
    let obs = probe_obs();
    let shape = EnvConfig::key_door().obs_shape();
    let mut b = Backbone::new(shape, 2).unwrap();
    b.freeze();
    let b = Arc::new(b);
    let m = CuriosityModule::build(Variant::PreNd, 3, shape, Some(b.clone()), CuriosityConfig::default()).unwrap();
    let feats = b.features(&obs).unwrap();
    assert_eq!(m.net_inputs(&obs).unwrap(), feats);
    assert_eq!(b.kind(), "backbone");
}
