//! Reinforced task weighting: loss-difference rewards, epsilon-greedy
//! trajectory sampling without replacement, self-critic REINFORCE updates of
//! the policy network, and count-based weight estimation.
//!
//! A *trajectory* is an ordered pick of `K` distinct source tasks. Position
//! `k` (1-based) of a trajectory is drawn from a mixture of a uniform draw
//! over the tasks still available and the policy distribution renormalized
//! to them, so the probability of trajectory `tau` under distribution `P` is
//!
//! ```text
//! f(tau) = prod_k [ eps / (M - k + 1)
//!                 + (1 - eps) * P[tau_k] / (1 - sum_{z<k} P[tau_z]) ]
//! ```
//!
//! These per-position mixtures each sum to one over the remaining tasks, so
//! `f` is an exact distribution over ordered `K`-subsets for any `eps` in
//! `[0, 1]` — the enumeration test below checks this to 1e-9.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PolicyNet, PolicyState};
use crate::optim::OptimizerState;
use crate::params::ParameterVector;
use crate::tape::{Tape, Val};
use crate::tasks::temperature_probs;

/// Exploration schedule for trajectory sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonSchedule {
    /// `eps(t) = start * max(0, 1 - t / zero_at)`: linear decay hitting zero
    /// at `zero_at` steps and staying there.
    Linear { start: f64, zero_at: u64 },
    /// Fixed exploration rate, mostly for diagnostics.
    Constant { value: f64 },
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule::Linear {
            start: 0.2,
            zero_at: 8000,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match self {
            EpsilonSchedule::Linear { start, zero_at } => {
                let frac = 1.0 - step as f64 / *zero_at as f64;
                start * frac.max(0.0)
            }
            EpsilonSchedule::Constant { value } => *value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            EpsilonSchedule::Linear { start, zero_at } => {
                (0.0..=1.0).contains(start) && *zero_at > 0
            }
            EpsilonSchedule::Constant { value } => (0.0..=1.0).contains(value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigError(format!("bad epsilon schedule {self:?}")))
        }
    }
}

/// Hyperparameters of the weighting pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlHyperparams {
    /// Trajectories sampled per iteration (N).
    pub n_trajectories: usize,
    /// Tasks per trajectory (K).
    pub trajectory_len: usize,
    pub epsilon: EpsilonSchedule,
    /// Entropy-regularization coefficient (rho).
    pub entropy_coef: f64,
    /// AdamW learning rate for the policy parameters.
    pub policy_lr: f64,
    /// Weight decay for the policy optimizer. Zero by default so that a
    /// zero-gradient iteration leaves the policy untouched.
    pub policy_weight_decay: f64,
    /// Standardize trajectory advantages (mean 0, unit variance over the N
    /// trajectories; skipped when their variance is below 1e-12).
    pub normalize_advantages: bool,
    /// Diagnostic: run the full pipeline but hand uniform weights to the
    /// meta-update, so trajectories cannot influence theta.
    pub stub_uniform_weights: bool,
}

impl Default for RlHyperparams {
    fn default() -> Self {
        RlHyperparams {
            n_trajectories: 4,
            trajectory_len: 2,
            epsilon: EpsilonSchedule::default(),
            entropy_coef: 0.01,
            policy_lr: 1e-3,
            policy_weight_decay: 0.0,
            normalize_advantages: false,
            stub_uniform_weights: false,
        }
    }
}

impl RlHyperparams {
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::ConfigError("n_trajectories must be positive".into()));
        }
        if self.trajectory_len == 0 || self.trajectory_len > num_tasks {
            return Err(Error::ConfigError(format!(
                "trajectory_len {} outside 1..={num_tasks}",
                self.trajectory_len
            )));
        }
        if self.entropy_coef < 0.0 || self.policy_lr <= 0.0 || self.policy_weight_decay < 0.0 {
            return Err(Error::ConfigError(
                "entropy_coef/policy_lr/policy_weight_decay out of range".into(),
            ));
        }
        self.epsilon.validate()
    }
}

/// Ordered pick of distinct task indices, with its log-probability under the
/// distribution it was sampled from and its total reward (filled in once
/// rewards are known).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub indices: Vec<usize>,
    pub log_prob: f64,
    pub reward: f64,
}

/// Per-task rewards for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector {
    pub iteration: usize,
    pub rewards: Vec<f64>,
}

/// Reward of source task `j` is how much better the adapted branch does on
/// the target batch than the unadapted model: `r_j = L_general - L_task_j`.
pub fn compute_rewards(
    iteration: usize,
    general_loss: f64,
    task_losses: &[f64],
) -> Result<RewardVector> {
    if task_losses.is_empty() {
        return Err(Error::EmptyBatch("no task losses".into()));
    }
    if !general_loss.is_finite() {
        return Err(Error::NonFiniteLoss(general_loss));
    }
    let mut rewards = Vec::with_capacity(task_losses.len());
    for l in task_losses {
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(*l));
        }
        rewards.push(general_loss - l);
    }
    Ok(RewardVector { iteration, rewards })
}

fn check_simplex(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::ConfigError("need at least 2 tasks".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::DegenerateDistribution(
            "negative or non-finite probability".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::DegenerateDistribution(format!(
            "probabilities sum to {sum}"
        )));
    }
    Ok(())
}

/// Log-probability of an ordered without-replacement trajectory under the
/// epsilon-greedy mixture (see the module docs for the formula).
pub fn trajectory_log_prob(probs: &[f64], indices: &[usize], epsilon: f64) -> Result<f64> {
    check_simplex(probs)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::ConfigError(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let m = probs.len();
    if indices.is_empty() || indices.len() > m {
        return Err(Error::ConfigError(format!(
            "trajectory of length {} for {m} tasks",
            indices.len()
        )));
    }
    let mut seen = vec![false; m];
    let mut prefix = 0.0;
    let mut log_prob = 0.0;
    for (k0, &idx) in indices.iter().enumerate() {
        if idx >= m || seen[idx] {
            return Err(Error::ConfigError(format!(
                "trajectory index {idx} repeated or out of range"
            )));
        }
        seen[idx] = true;
        let remaining = (m - k0) as f64;
        let denom = 1.0 - prefix;
        if denom <= 1e-12 {
            return Err(Error::DegenerateDistribution(format!(
                "prefix mass exhausted before position {}",
                k0 + 1
            )));
        }
        let p = epsilon / remaining + (1.0 - epsilon) * probs[idx] / denom;
        log_prob += p.ln();
        prefix += probs[idx];
    }
    Ok(log_prob)
}

/// Enumerates every ordered `k`-subset with its exact probability. Intended
/// for audits and tests; the count grows as M!/(M-k)!.
pub fn enumerate_trajectories(
    probs: &[f64],
    k: usize,
    epsilon: f64,
) -> Result<Vec<(Vec<usize>, f64)>> {
    check_simplex(probs)?;
    if k == 0 || k > probs.len() {
        return Err(Error::ConfigError(format!(
            "k = {k} outside 1..={}",
            probs.len()
        )));
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; probs.len()];
    fn recurse(
        probs: &[f64],
        k: usize,
        epsilon: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) -> Result<()> {
        if current.len() == k {
            let p = trajectory_log_prob(probs, current, epsilon)?.exp();
            out.push((current.clone(), p));
            return Ok(());
        }
        for i in 0..probs.len() {
            if !used[i] {
                used[i] = true;
                current.push(i);
                recurse(probs, k, epsilon, used, current, out)?;
                current.pop();
                used[i] = false;
            }
        }
        Ok(())
    }
    recurse(probs, k, epsilon, &mut used, &mut current, &mut out)?;
    Ok(out)
}

/// Samples one trajectory position by position: with probability `epsilon` a
/// uniform pick over the remaining tasks, otherwise a draw from the policy
/// distribution renormalized to them. The recorded `log_prob` is computed by
/// [`trajectory_log_prob`] on the result.
pub fn sample_trajectory(
    probs: &[f64],
    epsilon: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    check_simplex(probs)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::ConfigError(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let m = probs.len();
    if k == 0 || k > m {
        return Err(Error::ConfigError(format!("k = {k} outside 1..={m}")));
    }
    let mut available: Vec<usize> = (0..m).collect();
    let mut indices = Vec::with_capacity(k);
    for _ in 0..k {
        let choice = if rng.gen::<f64>() < epsilon {
            available[rng.gen_range(0..available.len())]
        } else {
            let mass: f64 = available.iter().map(|i| probs[*i]).sum();
            if mass <= 1e-12 {
                return Err(Error::DegenerateDistribution(
                    "remaining probability mass is zero".into(),
                ));
            }
            let mut u = rng.gen::<f64>() * mass;
            let mut picked = available[available.len() - 1];
            for &i in &available {
                u -= probs[i];
                if u <= 0.0 {
                    picked = i;
                    break;
                }
            }
            picked
        };
        indices.push(choice);
        available.retain(|i| *i != choice);
    }
    let log_prob = trajectory_log_prob(probs, &indices, epsilon)?;
    Ok(Trajectory {
        indices,
        log_prob,
        reward: 0.0,
    })
}

/// Greedy baseline trajectory: the top-`k` tasks by probability, ties going
/// to the lower index. Returns the summed reward of that pick.
pub fn self_critic_baseline(probs: &[f64], rewards: &[f64], k: usize) -> Result<f64> {
    check_simplex(probs)?;
    if rewards.len() != probs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rewards for {} tasks",
            rewards.len(),
            probs.len()
        )));
    }
    if k == 0 || k > probs.len() {
        return Err(Error::ConfigError(format!(
            "k = {k} outside 1..={}",
            probs.len()
        )));
    }
    let greedy = greedy_top_k(probs, k);
    Ok(greedy.iter().map(|i| rewards[*i]).sum())
}

/// Indices of the `k` largest values, ties resolved toward lower indices.
fn greedy_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps equal values in index order
    order.sort_by(|a, b| values[*b].partial_cmp(&values[*a]).unwrap());
    order.truncate(k);
    order
}

/// Counts how often each task appears across the sampled trajectories and
/// add-one smooths: `C_i = (count_i + 1) / (N * K)`. Weights are positive
/// and sum to `(N*K + M) / (N*K)`; they are deliberately not a distribution.
pub fn estimate_weights(trajectories: &[Trajectory], num_tasks: usize) -> Result<Vec<f64>> {
    if trajectories.is_empty() {
        return Err(Error::EmptyBatch("no trajectories".into()));
    }
    let k = trajectories[0].indices.len();
    if trajectories.iter().any(|t| t.indices.len() != k) {
        return Err(Error::ShapeMismatch(
            "trajectories disagree on length".into(),
        ));
    }
    let mut counts = vec![0usize; num_tasks];
    for t in trajectories {
        for &i in &t.indices {
            if i >= num_tasks {
                return Err(Error::ShapeMismatch(format!(
                    "trajectory index {i} for {num_tasks} tasks"
                )));
            }
            counts[i] += 1;
        }
    }
    let nk = (trajectories.len() * k) as f64;
    Ok(counts.iter().map(|c| (*c as f64 + 1.0) / nk).collect())
}

/// One REINFORCE ascent step on the policy parameters.
///
/// The objective is the mean advantage-weighted trajectory log-probability
/// plus entropy regularization of the current distribution,
///
/// ```text
/// J(phi) = (1/N) sum_n (R(tau_n) - baseline) * log f_phi(tau_n)
///          + entropy_coef * H(P_phi)
/// ```
///
/// where `P_phi` is recomputed on the tape from `pre_state` (the state the
/// sampler saw), so the gradient flows through both the trajectory terms and
/// the entropy. Advantages are constants. The caller's optimizer then takes
/// one step on `-J`.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_update(
    net: &PolicyNet,
    phi: &mut ParameterVector,
    pre_state: &PolicyState,
    trajectories: &[Trajectory],
    rewards: &[f64],
    baseline: f64,
    epsilon: f64,
    entropy_coef: f64,
    normalize_advantages: bool,
    opt: &mut OptimizerState,
) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::EmptyBatch("no trajectories".into()));
    }
    let m = net.config().num_tasks;
    if rewards.len() != m {
        return Err(Error::ShapeMismatch(format!("{} rewards for {m} tasks", rewards.len())));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::ConfigError(format!("epsilon {epsilon} outside [0, 1]")));
    }

    let mut advantages: Vec<f64> = trajectories
        .iter()
        .map(|t| t.indices.iter().map(|i| rewards[*i]).sum::<f64>() - baseline)
        .collect();
    if normalize_advantages {
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        if var >= 1e-12 {
            let sd = var.sqrt();
            for a in advantages.iter_mut() {
                *a = (*a - mean) / sd;
            }
        }
    }

    let mut tape = Tape::new();
    let p = tape.leaf(phi.values());
    let sv = net.state_to_vals(&mut tape, pre_state)?;
    let (probs, _) = net.step_tape(&mut tape, p, &sv)?;

    // Advantage-weighted log-probabilities of the sampled trajectories.
    let mut weighted: Vec<Val> = Vec::with_capacity(trajectories.len());
    for (t, &adv) in trajectories.iter().zip(&advantages) {
        let lp = trajectory_log_prob_tape(&mut tape, probs, &t.indices, epsilon, m)?;
        weighted.push(tape.scale(lp, adv));
    }
    let stacked = tape.concat(&weighted)?;
    let pg = tape.mean(stacked)?;

    // Entropy of the current distribution: H = -sum P ln P.
    let lnp = tape.ln(probs);
    let plnp = tape.mul(probs, lnp)?;
    let neg_h = tape.sum(plnp);
    let h = tape.neg(neg_h);
    let h_term = tape.scale(h, entropy_coef);

    let objective = tape.add(pg, h_term)?;
    let loss = tape.neg(objective); // ascend J by descending -J
    tape.backward(loss)?;
    let grad = tape.grad(p);
    opt.step(phi, &grad)
}

/// Builds the Eq.-style trajectory log-probability on the tape so gradients
/// reach the policy distribution.
fn trajectory_log_prob_tape(
    tape: &mut Tape,
    probs: Val,
    indices: &[usize],
    epsilon: f64,
    m: usize,
) -> Result<Val> {
    let one = tape.scalar(1.0);
    let mut prefix: Option<Val> = None; // sum of chosen probabilities so far
    let mut log_terms: Vec<Val> = Vec::with_capacity(indices.len());
    for (k0, &idx) in indices.iter().enumerate() {
        if idx >= m {
            return Err(Error::ShapeMismatch(format!("index {idx} for {m} tasks")));
        }
        let p_idx = tape.slice(probs, idx, 1)?;
        let denom = match prefix {
            None => one,
            Some(pref) => tape.sub(one, pref)?,
        };
        let ratio = tape.div(p_idx, denom)?;
        let scaled = tape.scale(ratio, 1.0 - epsilon);
        let remaining = (m - k0) as f64;
        let mixed = tape.add_const(scaled, epsilon / remaining);
        log_terms.push(tape.ln(mixed));
        prefix = Some(match prefix {
            None => p_idx,
            Some(pref) => tape.add(pref, p_idx)?,
        });
    }
    let stacked = tape.concat(&log_terms)?;
    Ok(tape.sum(stacked))
}

/// How the harness turns an iteration's context into per-task weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    Uniform,
    Random,
    GreedyTopK,
    Temperature,
    Rl,
}

/// Context handed to [`strategy_weights`]; strategies use what they need and
/// error on what they're missing.
pub struct WeightContext<'a> {
    pub num_tasks: usize,
    pub k: usize,
    pub rewards: Option<&'a [f64]>,
    pub dataset_sizes: Option<&'a [f64]>,
    pub omega: Option<f64>,
    pub trajectories: Option<&'a [Trajectory]>,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

/// Per-iteration weight vector under the chosen strategy:
///
/// * `uniform` — `1/M` everywhere;
/// * `random` — a Dirichlet(1, ..., 1) draw;
/// * `greedy_top_k` — `1/K` on the `K` highest-reward tasks;
/// * `temperature` — size-temperature probabilities of the source datasets;
/// * `rl` — count-based estimate from the sampled trajectories.
pub fn strategy_weights(strategy: WeightStrategy, ctx: WeightContext<'_>) -> Result<Vec<f64>> {
    let m = ctx.num_tasks;
    if m == 0 {
        return Err(Error::ConfigError("no tasks to weight".into()));
    }
    match strategy {
        WeightStrategy::Uniform => Ok(vec![1.0 / m as f64; m]),
        WeightStrategy::Random => {
            let rng = ctx
                .rng
                .ok_or_else(|| Error::ConfigError("random strategy needs an rng".into()))?;
            // Exp(1) draws normalized to the simplex = Dirichlet(1,...,1).
            let mut draws: Vec<f64> = Vec::with_capacity(m);
            for _ in 0..m {
                let u: f64 = rng.gen::<f64>();
                draws.push(-(1.0 - u).ln());
            }
            let z: f64 = draws.iter().sum();
            Ok(draws.iter().map(|d| d / z).collect())
        }
        WeightStrategy::GreedyTopK => {
            let rewards = ctx
                .rewards
                .ok_or_else(|| Error::ConfigError("greedy strategy needs rewards".into()))?;
            if rewards.len() != m {
                return Err(Error::ShapeMismatch(format!(
                    "{} rewards for {m} tasks",
                    rewards.len()
                )));
            }
            if ctx.k == 0 || ctx.k > m {
                return Err(Error::ConfigError(format!("k = {} outside 1..={m}", ctx.k)));
            }
            let top = greedy_top_k(rewards, ctx.k);
            let mut w = vec![0.0; m];
            for i in top {
                w[i] = 1.0 / ctx.k as f64;
            }
            Ok(w)
        }
        WeightStrategy::Temperature => {
            let sizes = ctx.dataset_sizes.ok_or_else(|| {
                Error::ConfigError("temperature strategy needs dataset sizes".into())
            })?;
            if sizes.len() != m {
                return Err(Error::ShapeMismatch(format!(
                    "{} sizes for {m} tasks",
                    sizes.len()
                )));
            }
            let omega = ctx
                .omega
                .ok_or_else(|| Error::ConfigError("temperature strategy needs omega".into()))?;
            temperature_probs(sizes, omega)
        }
        WeightStrategy::Rl => {
            let trajectories = ctx.trajectories.ok_or_else(|| {
                Error::ConfigError("rl strategy needs sampled trajectories".into())
            })?;
            estimate_weights(trajectories, m)
        }
    }
}
