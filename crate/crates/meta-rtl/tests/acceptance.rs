//! The release gate: ten end-to-end checks, one test per criterion, each
//! printing a PASS line with its measured numbers (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::collections::BTreeMap;
use std::time::Instant;

use meta_rtl::gradcheck::{standard_battery, FD_TOL};
use meta_rtl::harness::{
    run_experiment, DataSpec, Method, MetricsRow, ModelConfig, PolicyConfig, RunConfig,
};
use meta_rtl::meta::{MetaHyperparams, RlComponents};
use meta_rtl::model::{PolicyNet, PolicyNetConfig};
use meta_rtl::rl::{
    enumerate_trajectories, reinforce_update, sample_trajectory, self_critic_baseline,
    EpsilonSchedule, RlHyperparams,
};
use meta_rtl::rng;
use meta_rtl::tasks::temperature_probs;

#[test]
fn acceptance_01_gradient_audit() {
    let started = Instant::now();
    let sections = standard_battery(34, 7).unwrap(); // 3 sections x 34 points
    let elapsed = started.elapsed();
    let mut worst = 0.0f64;
    let mut points = 0;
    for s in &sections {
        assert_eq!(
            s.flagged, 0,
            "{}: {} coordinates above tolerance (max {:.3e})",
            s.name, s.flagged, s.max_rel_err
        );
        assert!(s.max_rel_err < FD_TOL, "{}: {:.3e}", s.name, s.max_rel_err);
        worst = worst.max(s.max_rel_err);
        points += s.points;
    }
    assert!(points >= 100, "only {points} evaluation points");
    assert!(
        elapsed.as_secs() < 60,
        "gradient audit took {elapsed:?}, budget 60s"
    );
    println!(
        "ACCEPTANCE 1 PASS: {points} gradient-check points, max relative error {worst:.3e} \
         (tolerance {FD_TOL:.0e}), {elapsed:?}"
    );
}

#[test]
fn acceptance_02_trajectory_distribution_exact_and_sampled() {
    // exact normalization across a grid of sizes and exploration rates
    let mut checked = 0;
    for m in 2..=6usize {
        let mut r = rng::stream(2, &format!("accept2/{m}"));
        let raw: Vec<f64> = (0..m)
            .map(|_| rand::Rng::gen::<f64>(&mut r) + 0.05)
            .collect();
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / z).collect();
        for k in 1..=3.min(m) {
            for eps in [0.0, 0.2, 0.7, 1.0] {
                let total: f64 = enumerate_trajectories(&probs, k, eps)
                    .unwrap()
                    .iter()
                    .map(|(_, p)| p)
                    .sum();
                assert!(
                    (total - 1.0).abs() <= 1e-9,
                    "M={m} K={k} eps={eps}: sum {total}"
                );
                checked += 1;
            }
        }
    }

    // the sampler agrees with the exact distribution
    let probs = [0.5, 0.3, 0.2];
    let (k, eps) = (2usize, 0.2f64);
    let exact = enumerate_trajectories(&probs, k, eps).unwrap();
    let draws = 200_000usize;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut r = rng::stream(7, "accept2/mc");
    for _ in 0..draws {
        let t = sample_trajectory(&probs, eps, k, &mut r).unwrap();
        *counts.entry(t.indices).or_insert(0) += 1;
    }
    let mut max_gap = 0.0f64;
    for (indices, p) in &exact {
        let f = *counts.get(indices).unwrap_or(&0) as f64 / draws as f64;
        max_gap = max_gap.max((f - p).abs());
        assert!(
            (f - p).abs() < 0.005,
            "{indices:?}: sampled {f:.4} vs exact {p:.4}"
        );
    }
    println!(
        "ACCEPTANCE 2 PASS: {checked} grid cells normalize within 1e-9; \
         {draws} draws match exact probabilities within {max_gap:.4} (< 0.005)"
    );
}

fn small_synthetic(data_seed: u64) -> DataSpec {
    DataSpec::Synthetic {
        input_dim: 6,
        n_candidates: 3,
        source_rhos: vec![0.9, 0.4, 0.0],
        source_size: 80,
        target_train_size: 40,
        target_dev_size: 30,
        label_noise: 0.0,
        target_label_noise: 0.0,
        data_seed,
    }
}

fn small_config(method: Method, iterations: usize) -> RunConfig {
    RunConfig {
        method,
        data: small_synthetic(11),
        model: ModelConfig {
            hidden_dim: 5,
            layers: 1,
        },
        policy: PolicyConfig {
            hidden_dim: 6,
            window: 3,
            ffn_hidden: 6,
        },
        meta: MetaHyperparams {
            inner_lr: 0.05,
            meta_lr: 0.5,
            inner_steps: 2,
            support_size: 6,
            query_size: 4,
            target_batch_size: 16,
            max_iterations: iterations,
            early_stop_window: 0,
            early_stop_tol: 0.0,
            transfer_lr: 0.05,
            transfer_batches: 5,
            transfer_batch_size: 8,
        },
        rl: RlHyperparams {
            n_trajectories: 2,
            trajectory_len: 2,
            ..Default::default()
        },
        seeds: vec![0],
        omega: 2.0,
        target_train_fraction: 1.0,
        deterministic_timing: true,
        log_every: 1_000_000,
    }
}

fn train_loss_bits(rows: &[MetricsRow]) -> Vec<u64> {
    rows.iter()
        .filter(|r| r.split == "train")
        .map(|r| r.loss.to_bits())
        .collect()
}

#[test]
fn acceptance_03_uniform_weights_reduce_to_the_unweighted_methods() {
    for (plain, weighted, name) in [
        (Method::Reptile, Method::MetaRtlReptile, "interpolation"),
        (Method::Fomaml, Method::MetaRtlFomaml, "query-gradient"),
    ] {
        let base = run_experiment(&small_config(plain, 100)).unwrap();
        let mut cfg = small_config(weighted, 100);
        cfg.rl.stub_uniform_weights = true;
        let stubbed = run_experiment(&cfg).unwrap();

        let a = train_loss_bits(&base.rows);
        let b = train_loss_bits(&stubbed.rows);
        assert_eq!(a.len(), 100);
        assert_eq!(a, b, "{name}: per-iteration losses diverged");

        let pa = &base.final_params[0].1;
        let pb = &stubbed.final_params[0].1;
        for (x, y) in pa.values().iter().zip(pb.values()) {
            assert_eq!(
                x.to_bits(),
                y.to_bits(),
                "{name}: final parameters diverged"
            );
        }
    }
    println!(
        "ACCEPTANCE 3 PASS: uniform-stubbed policy runs are bit-identical to reptile and \
         fomaml over 100 iterations (losses and final parameters)"
    );
}

#[test]
fn acceptance_04_zero_adaptation_is_exactly_neutral() {
    // The config validator rejects inner_steps = 0, so this diagnostic builds
    // the loop directly.
    use meta_rtl::meta::{EpisodeSampling, MetaUpdateRule, MetaRunner};
    use meta_rtl::model::{EncoderConfig, ScoringModel};
    use meta_rtl::rl::WeightStrategy;
    use meta_rtl::tasks::synthetic::random_unit_vector;
    use meta_rtl::tasks::{make_synthetic_family, SyntheticFamilySpec};

    let dim = 6;
    let mut concept_rng = rng::stream(4, "concept");
    let concept = random_unit_vector(dim, &mut concept_rng);
    let family = |id: &str, rho: f64, n: usize, seed: u64| {
        let spec = SyntheticFamilySpec {
            family_id: id.to_string(),
            input_dim: dim,
            n_candidates: 3,
            reference_concept: concept.clone(),
            rho_rel: rho,
            label_noise: 0.0,
            instances: n,
        };
        make_synthetic_family(&spec, seed).unwrap().0
    };
    let sources = vec![
        family("s0", 0.9, 60, 40),
        family("s1", 0.4, 60, 41),
        family("s2", 0.0, 60, 42),
    ];
    let target = family("t", 1.0, 40, 43);

    let mut hp = MetaHyperparams::default();
    hp.inner_steps = 0;
    hp.max_iterations = 20;
    hp.early_stop_window = 0;
    hp.support_size = 6;
    hp.query_size = 4;
    hp.target_batch_size = 16;

    for with_policy in [false, true] {
        let model = ScoringModel::new(EncoderConfig {
            input_dim: dim,
            hidden_dim: 5,
            layers: 1,
        })
        .unwrap();
        let theta0 = model.init_params(rng::derive_seed(4, "theta"));
        let (strategy, rl) = if with_policy {
            let net = PolicyNet::new(PolicyNetConfig {
                num_tasks: 3,
                hidden_dim: 6,
                window: 3,
                ffn_hidden: 6,
            })
            .unwrap();
            let comp = RlComponents::fresh(net, RlHyperparams::default(), 4).unwrap();
            (WeightStrategy::Rl, Some(comp))
        } else {
            (WeightStrategy::Uniform, None)
        };
        let mut runner = MetaRunner::new(
            model,
            theta0.clone(),
            sources.clone(),
            target.clone(),
            hp.clone(),
            MetaUpdateRule::Interpolate,
            strategy,
            EpisodeSampling::AllSources,
            rl,
            4,
        )
        .unwrap();
        runner.run().unwrap();
        assert_eq!(runner.iteration(), 20);
        for (a, b) in theta0.values().iter().zip(runner.theta().values()) {
            assert_eq!(
                a.to_bits(),
                b.to_bits(),
                "policy={with_policy}: zero-step adaptation moved theta"
            );
        }
    }
    println!(
        "ACCEPTANCE 4 PASS: with inner_steps = 0 the initialization is bit-unchanged after \
         20 iterations under both uniform and policy weighting"
    );
}

/// Pure bandit: fixed per-task rewards, full policy/REINFORCE loop. Returns
/// the first iteration where the good task's probability exceeds 0.6.
fn bandit_first_hit(seed: u64, max_iters: usize) -> Option<(usize, f64)> {
    let rewards = [1.0, 0.0, 0.0, 0.0];
    let net = PolicyNet::new(PolicyNetConfig {
        num_tasks: 4,
        hidden_dim: 16,
        window: 4,
        ffn_hidden: 16,
    })
    .unwrap();
    let hp = RlHyperparams {
        n_trajectories: 4,
        trajectory_len: 2,
        entropy_coef: 0.01,
        ..Default::default()
    };
    let mut comp = RlComponents::fresh(net, hp, seed).unwrap();
    let mut r = rng::stream(seed, "bandit");
    let mut best = 0.0f64;
    for t in 0..max_iters {
        let eps = comp.hp.epsilon.at(t as u64);
        let pre = comp.state.clone();
        let (probs, carried) = comp.net.policy_step(&comp.phi, &pre).unwrap();
        best = best.max(probs[0]);
        if probs[0] > 0.6 {
            return Some((t, probs[0]));
        }
        let mut trajectories = Vec::with_capacity(comp.hp.n_trajectories);
        for _ in 0..comp.hp.n_trajectories {
            let mut tr = sample_trajectory(&probs, eps, comp.hp.trajectory_len, &mut r).unwrap();
            tr.reward = tr.indices.iter().map(|i| rewards[*i]).sum();
            trajectories.push(tr);
        }
        let baseline = self_critic_baseline(&probs, &rewards, comp.hp.trajectory_len).unwrap();
        reinforce_update(
            &comp.net,
            &mut comp.phi,
            &pre,
            &trajectories,
            &rewards,
            baseline,
            eps,
            comp.hp.entropy_coef,
            false,
            &mut comp.optimizer,
        )
        .unwrap();
        let mut next = carried;
        next.set_prev_rewards(&rewards).unwrap();
        comp.state = next;
    }
    None
}

#[test]
fn acceptance_05_policy_solves_a_planted_bandit() {
    let started = Instant::now();
    let mut hits = Vec::new();
    for seed in 0..5u64 {
        match bandit_first_hit(seed, 1500) {
            Some((t, p)) => hits.push((seed, t, p)),
            None => panic!("seed {seed}: P[good] never exceeded 0.6 within 1500 iterations"),
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "bandit suite took {elapsed:?}, budget 120s"
    );
    let worst = hits.iter().map(|(_, t, _)| *t).max().unwrap();
    println!(
        "ACCEPTANCE 5 PASS: 5/5 seeds pushed the planted task above 0.6 \
         (slowest at iteration {worst} of 1500 allowed), {elapsed:?}"
    );
}

/// Six sources, two aligned with the target concept, two unrelated, two
/// anti-correlated. Uniform aggregation is dragged by the bad branches;
/// reward-driven weighting should learn to avoid them.
fn ordering_config(method: Method, seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        method,
        data: DataSpec::Synthetic {
            input_dim: 12,
            n_candidates: 4,
            source_rhos: vec![0.95, 0.9, 0.1, 0.0, -0.5, -0.7],
            source_size: 400,
            target_train_size: 40,
            target_dev_size: 400,
            label_noise: 0.0,
            target_label_noise: 0.0,
            data_seed: 100,
        },
        model: ModelConfig {
            hidden_dim: 10,
            layers: 1,
        },
        policy: PolicyConfig {
            hidden_dim: 12,
            window: 4,
            ffn_hidden: 12,
        },
        meta: MetaHyperparams {
            inner_lr: 0.08,
            meta_lr: 0.6,
            inner_steps: 3,
            support_size: 10,
            query_size: 6,
            target_batch_size: 20,
            max_iterations: 500,
            early_stop_window: 0,
            early_stop_tol: 0.0,
            transfer_lr: 0.03,
            transfer_batches: 5,
            transfer_batch_size: 10,
        },
        rl: RlHyperparams {
            n_trajectories: 4,
            trajectory_len: 2,
            policy_lr: 2e-3,
            ..Default::default()
        },
        seeds,
        omega: 2.0,
        target_train_fraction: 1.0,
        deterministic_timing: true,
        log_every: 1_000_000,
    }
}

#[test]
fn acceptance_06_method_ordering_on_heterogeneous_sources() {
    let started = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let tf = run_experiment(&ordering_config(Method::TargetFinetune, seeds.clone())).unwrap();
    let reptile = run_experiment(&ordering_config(Method::Reptile, seeds.clone())).unwrap();
    let rtl = run_experiment(&ordering_config(Method::MetaRtlReptile, seeds)).unwrap();
    let elapsed = started.elapsed();

    let (a_tf, a_rep, a_rtl) = (
        tf.summary.final_accuracy_mean,
        reptile.summary.final_accuracy_mean,
        rtl.summary.final_accuracy_mean,
    );
    assert!(
        a_rep > a_tf,
        "reptile {a_rep:.4} must beat target-only {a_tf:.4}"
    );
    assert!(
        a_rtl >= a_rep + 0.02,
        "policy weighting {a_rtl:.4} must beat uniform {a_rep:.4} by >= 2 points"
    );
    assert!(
        elapsed.as_secs() < 600,
        "ordering suite took {elapsed:?}, budget 600s"
    );
    println!(
        "ACCEPTANCE 6 PASS: target-only {a_tf:.4} < reptile {a_rep:.4} <= \
         reinforced {a_rtl:.4} (gap {:.4} >= 0.02) over 10 seeds, {elapsed:?}",
        a_rtl - a_rep
    );
}

#[test]
fn acceptance_07_low_resource_gap_shrinks_with_more_target_data() {
    let seeds: Vec<u64> = (0..3).collect();
    let mut gaps = Vec::new();
    for fraction in [0.05, 0.2, 0.4] {
        // Longer fine-tuning than the ordering run so the target-only
        // baseline can actually consume the extra data at high fractions.
        let make = |method: Method| {
            let mut cfg = ordering_config(method, seeds.clone());
            if let DataSpec::Synthetic {
                target_train_size, ..
            } = &mut cfg.data
            {
                *target_train_size = 1000;
            }
            cfg.target_train_fraction = fraction;
            cfg.meta.max_iterations = 300;
            cfg.meta.transfer_lr = 0.05;
            cfg.meta.transfer_batches = 80;
            cfg.meta.transfer_batch_size = 10;
            cfg
        };
        let rtl = run_experiment(&make(Method::MetaRtlReptile)).unwrap();
        let tf = run_experiment(&make(Method::TargetFinetune)).unwrap();
        gaps.push((
            fraction,
            rtl.summary.final_accuracy_mean - tf.summary.final_accuracy_mean,
        ));
    }
    let tol = 0.01;
    for pair in gaps.windows(2) {
        assert!(
            pair[1].1 <= pair[0].1 + tol,
            "gap grew with more data: {pair:?}"
        );
    }
    assert!(
        gaps[0].1 > 0.0,
        "no low-resource benefit at 5%: {:.4}",
        gaps[0].1
    );
    println!(
        "ACCEPTANCE 7 PASS: transfer benefit over target-only fine-tuning does not grow with \
         target data: {:.4} (5%) -> {:.4} (20%) -> {:.4} (40%)",
        gaps[0].1, gaps[1].1, gaps[2].1
    );
}

#[test]
fn acceptance_08_temperature_sampling_matches_the_pinned_values() {
    let sizes = [9741.0, 40398.0, 10176.0, 3510.0];
    let expected = [0.1526, 0.6330, 0.1594, 0.0550];
    let probs = temperature_probs(&sizes, 1.0).unwrap();
    let mut max_gap = 0.0f64;
    for (p, e) in probs.iter().zip(&expected) {
        max_gap = max_gap.max((p - e).abs());
        assert!((p - e).abs() <= 5e-4, "{p:.4} vs pinned {e:.4}");
    }
    let flat = temperature_probs(&sizes, 1e6).unwrap();
    for p in &flat {
        assert!((p - 0.25).abs() < 1e-5, "omega -> inf should be uniform");
    }
    println!(
        "ACCEPTANCE 8 PASS: size-temperature probabilities match pinned values within \
         {max_gap:.1e} (<= 5e-4) and flatten to uniform as omega grows"
    );
}

#[test]
fn acceptance_09_exploration_schedule_endpoints() {
    let s = EpsilonSchedule::Linear {
        start: 0.2,
        zero_at: 8000,
    };
    assert_eq!(s.at(0), 0.2);
    assert!((s.at(4000) - 0.1).abs() < 1e-15);
    assert_eq!(s.at(8000), 0.0);
    assert_eq!(s.at(16_000), 0.0);
    println!(
        "ACCEPTANCE 9 PASS: linear schedule hits 0.2 at step 0, 0.1 at 4000, and exactly 0 \
         at 8000 and beyond"
    );
}

#[test]
fn acceptance_10_cli_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Method::MetaRtlReptile, 30);
    cfg.seeds = vec![0, 1];
    cfg.log_every = 10;
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let bin = env!("CARGO_BIN_EXE_meta-rtl");
    let run = |out: &str| {
        let output = std::process::Command::new(bin)
            .args(["run", "--config"])
            .arg(&cfg_path)
            .args(["--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "run into {out} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    };
    run("a");
    run("b");

    for file in ["metrics.csv", "summary.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
        assert!(!a.is_empty());
    }

    // config problems exit with code 1
    let output = std::process::Command::new(bin)
        .args(["run", "--config"])
        .arg(dir.path().join("missing.json"))
        .args(["--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));

    let metrics = std::fs::read_to_string(dir.path().join("a").join("metrics.csv")).unwrap();
    let rows = metrics.lines().count() - 1;
    println!(
        "ACCEPTANCE 10 PASS: two CLI runs produced byte-identical metrics.csv ({rows} rows) \
         and summary.json; a missing config exits with code 1"
    );
}
