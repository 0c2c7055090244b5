//! Randomized invariant checks over the sampling, weighting, and update
//! machinery.

use proptest::prelude::*;

use meta_rtl::meta::{reptile_update, weighted_update};
use meta_rtl::model::{PolicyNet, PolicyNetConfig, PolicyState};
use meta_rtl::params::{ParamLayout, ParameterVector};
use meta_rtl::rl::{
    enumerate_trajectories, estimate_weights, trajectory_log_prob, EpsilonSchedule, Trajectory,
};
use meta_rtl::tasks::temperature_probs;

/// A random point on the M-simplex with every coordinate at least `floor`.
fn simplex(m: usize, floor: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(floor..1.0f64, m).prop_map(|raw| {
        let z: f64 = raw.iter().sum();
        raw.iter().map(|x| x / z).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_probabilities_normalize(
        m in 2usize..6,
        eps in 0.0f64..=1.0,
        raw in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let z: f64 = raw[..m].iter().sum();
        let probs: Vec<f64> = raw[..m].iter().map(|x| x / z).collect();
        for k in 1..=m.min(3) {
            let all = enumerate_trajectories(&probs, k, eps).unwrap();
            let total: f64 = all.iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-9, "M={m} K={k} eps={eps}: {total}");
        }
    }

    #[test]
    fn single_step_trajectory_probability_is_the_mixture(
        m in 2usize..7,
        eps in 0.0f64..=1.0,
        raw in prop::collection::vec(0.01f64..1.0, 7),
        pick in 0usize..7,
    ) {
        let pick = pick % m;
        let z: f64 = raw[..m].iter().sum();
        let probs: Vec<f64> = raw[..m].iter().map(|x| x / z).collect();
        let lp = trajectory_log_prob(&probs, &[pick], eps).unwrap();
        let expected = eps / m as f64 + (1.0 - eps) * probs[pick];
        prop_assert!((lp.exp() - expected).abs() < 1e-12);
    }

    #[test]
    fn estimated_weights_hit_their_bounds(
        m in 2usize..6,
        n in 1usize..8,
        picks in prop::collection::vec(prop::collection::vec(0usize..100, 3), 8),
    ) {
        let k = 2.min(m);
        // build n trajectories of k distinct indices each
        let trajectories: Vec<Trajectory> = (0..n)
            .map(|i| {
                let mut indices: Vec<usize> = Vec::new();
                let mut cursor = picks[i][0];
                while indices.len() < k {
                    let candidate = cursor % m;
                    if !indices.contains(&candidate) {
                        indices.push(candidate);
                    }
                    cursor += 1;
                }
                Trajectory { indices, log_prob: 0.0, reward: 0.0 }
            })
            .collect();
        let w = estimate_weights(&trajectories, m).unwrap();
        let nk = (n * k) as f64;
        let total: f64 = w.iter().sum();
        prop_assert!((total - (nk + m as f64) / nk).abs() < 1e-9);
        for c in &w {
            // every count is in [0, n]
            prop_assert!(*c >= 1.0 / nk - 1e-12);
            prop_assert!(*c <= (n as f64 + 1.0) / nk + 1e-12);
        }
    }

    #[test]
    fn blend_is_linear_in_the_step_size(
        theta in prop::collection::vec(-2.0f64..2.0, 4),
        branch in prop::collection::vec(-2.0f64..2.0, 4),
        beta in 0.0f64..1.0,
    ) {
        let layout = ParamLayout::build(&[("w", 4)]).unwrap();
        let t = ParameterVector::from_values(layout.clone(), theta.clone()).unwrap();
        let b = ParameterVector::from_values(layout, branch.clone()).unwrap();
        let out = weighted_update(&t, &[b], &[1.0], beta).unwrap();
        for j in 0..4 {
            let expected = theta[j] + beta * (branch[j] - theta[j]);
            prop_assert!((out.values()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coefficients_leave_theta_alone(
        theta in prop::collection::vec(-2.0f64..2.0, 4),
        branch in prop::collection::vec(-2.0f64..2.0, 4),
        beta in 0.0f64..1.0,
    ) {
        let layout = ParamLayout::build(&[("w", 4)]).unwrap();
        let t = ParameterVector::from_values(layout.clone(), theta.clone()).unwrap();
        let b = ParameterVector::from_values(layout, branch).unwrap();
        let out = weighted_update(&t, &[b], &[0.0], beta).unwrap();
        prop_assert_eq!(out.values(), t.values());
    }

    #[test]
    fn uniform_update_is_permutation_invariant(
        theta in prop::collection::vec(-1.0f64..1.0, 3),
        b1 in prop::collection::vec(-1.0f64..1.0, 3),
        b2 in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let layout = ParamLayout::build(&[("w", 3)]).unwrap();
        let t = ParameterVector::from_values(layout.clone(), theta).unwrap();
        let x = ParameterVector::from_values(layout.clone(), b1).unwrap();
        let y = ParameterVector::from_values(layout, b2).unwrap();
        let ab = reptile_update(&t, &[x.clone(), y.clone()], 0.5).unwrap();
        let ba = reptile_update(&t, &[y, x], 0.5).unwrap();
        for (p, q) in ab.values().iter().zip(ba.values()) {
            prop_assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn temperature_flattens_toward_uniform(
        raw in prop::collection::vec(1.0f64..10_000.0, 4),
        omega in 1.0f64..50.0,
    ) {
        let p1 = temperature_probs(&raw, 1.0).unwrap();
        let pw = temperature_probs(&raw, omega).unwrap();
        let spread = |p: &[f64]| {
            let mx = p.iter().cloned().fold(f64::MIN, f64::max);
            let mn = p.iter().cloned().fold(f64::MAX, f64::min);
            mx - mn
        };
        prop_assert!((pw.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(spread(&pw) <= spread(&p1) + 1e-12);
        // ordering by size is preserved
        for i in 0..4 {
            for j in 0..4 {
                if raw[i] > raw[j] {
                    prop_assert!(pw[i] >= pw[j] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn epsilon_schedule_decays_monotonically(
        start in 0.0f64..=1.0,
        zero_at in 1u64..100_000,
        t in 0u64..200_000,
    ) {
        let s = EpsilonSchedule::Linear { start, zero_at };
        let now = s.at(t);
        let next = s.at(t + 1);
        prop_assert!((0.0..=start.max(0.0) + 1e-15).contains(&now));
        prop_assert!(next <= now + 1e-15);
        prop_assert_eq!(s.at(zero_at), 0.0);
    }

    #[test]
    fn policy_always_emits_a_distribution(
        seed in 0u64..1_000,
        rewards in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let net = PolicyNet::new(PolicyNetConfig {
            num_tasks: 3,
            hidden_dim: 4,
            window: 2,
            ffn_hidden: 4,
        })
        .unwrap();
        let phi = net.init_params(seed);
        let mut state = PolicyState::initial(net.config());
        for _ in 0..3 {
            let (probs, mut next) = net.policy_step(&phi, &state).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(probs.iter().all(|p| *p >= 0.0 && p.is_finite()));
            next.set_prev_rewards(&rewards).unwrap();
            state = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simplex_inputs_always_enumerate_cleanly(
        probs in simplex(4, 0.01),
        eps in 0.0f64..=1.0,
    ) {
        let all = enumerate_trajectories(&probs, 2, eps).unwrap();
        prop_assert_eq!(all.len(), 12); // 4 * 3 ordered pairs
        for (indices, p) in &all {
            prop_assert!(indices[0] != indices[1]);
            prop_assert!(*p > 0.0 || (eps == 0.0 && (probs[indices[0]] == 0.0)));
            let lp = trajectory_log_prob(&probs, indices, eps).unwrap();
            prop_assert!((lp.exp() - p).abs() < 1e-12);
        }
    }
}
