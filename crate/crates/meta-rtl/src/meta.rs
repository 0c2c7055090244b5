//! Multi-source meta-learning: inner-loop adaptation, first-order
//! meta-updates (interpolation toward adapted branches, or averaged
//! post-adaptation query gradients), weighted variants of both, transfer
//! fine-tuning, and the iteration loop that ties them to a task-weighting
//! strategy.
//!
//! Every random draw comes from a stream derived from the run seed and a
//! purpose tag (`episode/{iter}/{slot}`, `target/{iter}`, `traj/{iter}`, ...),
//! so adding or removing one consumer never shifts the draws of another.
//! That is what makes the uniform-weight ablations bit-identical to their
//! unweighted counterparts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChoiceInstance, PolicyNet, PolicyState, ScoringModel};
use crate::optim::OptimizerState;
use crate::params::{blend_parameters, ParameterVector};
use crate::rl::{
    self, sample_trajectory, self_critic_baseline, RlHyperparams, WeightContext, WeightStrategy,
};
use crate::rng;
use crate::tape::{evaluate_with_gradients, Objective};
use crate::tasks::{sample_episode, sample_target_batch, temperature_probs, TaskDataset};

/// Knobs of the meta-training and transfer loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaHyperparams {
    /// Inner-loop (task adaptation) learning rate.
    pub inner_lr: f64,
    /// Meta-step size applied to the blended update.
    pub meta_lr: f64,
    /// Gradient steps per task adaptation.
    pub inner_steps: usize,
    pub support_size: usize,
    pub query_size: usize,
    /// Instances drawn from the target task per iteration for reward and
    /// progress measurement.
    pub target_batch_size: usize,
    pub max_iterations: usize,
    /// Moving-average window for early stopping; 0 disables it.
    pub early_stop_window: usize,
    /// Stop once the window-mean target loss improves by less than this.
    pub early_stop_tol: f64,
    /// Transfer fine-tuning learning rate.
    pub transfer_lr: f64,
    pub transfer_batches: usize,
    pub transfer_batch_size: usize,
}

impl Default for MetaHyperparams {
    fn default() -> Self {
        MetaHyperparams {
            inner_lr: 1e-2,
            meta_lr: 0.5,
            inner_steps: 4,
            support_size: 8,
            query_size: 8,
            target_batch_size: 32,
            max_iterations: 2000,
            early_stop_window: 50,
            early_stop_tol: 1e-4,
            transfer_lr: 1e-2,
            transfer_batches: 100,
            transfer_batch_size: 16,
        }
    }
}

impl MetaHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.inner_lr <= 0.0 || self.meta_lr <= 0.0 || self.transfer_lr < 0.0 {
            return Err(Error::ConfigError(
                "learning rates must be positive (transfer_lr may be zero)".into(),
            ));
        }
        if self.inner_steps == 0 {
            return Err(Error::ConfigError("inner_steps must be at least 1".into()));
        }
        if self.support_size == 0 || self.query_size == 0 || self.target_batch_size == 0 {
            return Err(Error::ConfigError("batch sizes must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::ConfigError("max_iterations must be positive".into()));
        }
        if self.early_stop_tol < 0.0 {
            return Err(Error::ConfigError("early_stop_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which first-order meta-update moves the shared initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaUpdateRule {
    /// Move toward the adapted branches: `theta += beta * sum_j c_j *
    /// (theta_j' - theta)`.
    Interpolate,
    /// Step along the post-adaptation query gradients: `theta -= beta *
    /// sum_j c_j * grad L_query(theta_j')`.
    QueryGradient,
}

/// How episodes are drawn each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeSampling {
    /// One episode from every source task, every iteration.
    AllSources,
    /// Draw as many task slots as there are sources, i.i.d. from the
    /// size-temperature distribution; blend the slots uniformly.
    Temperature { omega: f64 },
}

/// `steps` plain gradient-descent steps on `objective`, starting from
/// `params`. `steps = 0` returns the input unchanged, which is useful as a
/// no-adaptation control.
pub fn inner_adapt<O: Objective + ?Sized>(
    params: &ParameterVector,
    objective: &O,
    steps: usize,
    lr: f64,
) -> Result<ParameterVector> {
    let mut adapted = params.clone();
    let mut opt = OptimizerState::sgd(lr);
    for _ in 0..steps {
        let (_, grad) = evaluate_with_gradients(&adapted, objective)?;
        opt.step(&mut adapted, &grad)?;
    }
    Ok(adapted)
}

/// Interpolation meta-update with explicit non-negative branch coefficients.
pub fn weighted_update(
    theta: &ParameterVector,
    branches: &[ParameterVector],
    coeffs: &[f64],
    beta: f64,
) -> Result<ParameterVector> {
    if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::ConfigError(format!(
            "branch coefficients must be finite and non-negative, got {coeffs:?}"
        )));
    }
    blend_parameters(theta, branches, coeffs, beta)
}

/// Uniform interpolation meta-update: every branch weighted `1/M`.
pub fn reptile_update(
    theta: &ParameterVector,
    branches: &[ParameterVector],
    beta: f64,
) -> Result<ParameterVector> {
    if branches.is_empty() {
        return Err(Error::EmptyBatch("reptile_update: no branches".into()));
    }
    let coeffs = vec![1.0 / branches.len() as f64; branches.len()];
    weighted_update(theta, branches, &coeffs, beta)
}

/// First-order query-gradient meta-update: `theta -= beta * sum_j c_j * g_j`
/// where `g_j` is the query-loss gradient at branch `j`'s adapted
/// parameters. Accumulates the weighted sum first, then applies one scaled
/// step, mirroring [`blend_parameters`].
pub fn query_grad_update(
    theta: &ParameterVector,
    query_grads: &[Vec<f64>],
    coeffs: &[f64],
    beta: f64,
) -> Result<ParameterVector> {
    if query_grads.is_empty() {
        return Err(Error::EmptyBatch("query_grad_update: no gradients".into()));
    }
    if query_grads.len() != coeffs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients but {} coefficients",
            query_grads.len(),
            coeffs.len()
        )));
    }
    if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::ConfigError(format!(
            "branch coefficients must be finite and non-negative, got {coeffs:?}"
        )));
    }
    let n = theta.values().len();
    let mut acc = vec![0.0; n];
    for (g, &c) in query_grads.iter().zip(coeffs) {
        if g.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "gradient of {} for {} parameters",
                g.len(),
                n
            )));
        }
        for j in 0..n {
            acc[j] += c * g[j];
        }
    }
    let mut out = theta.clone();
    {
        let v = out.values_mut();
        for j in 0..n {
            v[j] -= beta * acc[j];
        }
    }
    out.validate_finite()?;
    Ok(out)
}

/// Fine-tunes `params` on the target training set: `batches` batches of
/// `batch_size`, each drawn from its own derived stream, stepped with plain
/// SGD at `lr`. `lr = 0` or `batches = 0` returns the input unchanged.
pub fn transfer_finetune(
    model: &ScoringModel,
    params: &ParameterVector,
    target_train: &TaskDataset,
    batches: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ParameterVector> {
    let mut tuned = params.clone();
    let mut opt = OptimizerState::sgd(lr);
    for b in 0..batches {
        let batch = sample_target_batch(
            target_train,
            batch_size.min(target_train.len()),
            rng::derive_seed(seed, &format!("transfer/{b}")),
        )?;
        let obj = model.objective(&batch);
        let (_, grad) = evaluate_with_gradients(&tuned, &obj)?;
        opt.step(&mut tuned, &grad)?;
    }
    Ok(tuned)
}

/// Everything the weighting side of an iteration produced, for logging.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Target-batch loss of the shared initialization before this
    /// iteration's update.
    pub loss: f64,
    /// Target-batch accuracy at the same point.
    pub accuracy: f64,
    /// Blend coefficients used by the meta-update, indexed by source task
    /// (duplicate temperature slots are summed into their task).
    pub weights: Vec<f64>,
    /// Per-task rewards, when the strategy computed them.
    pub rewards: Option<Vec<f64>>,
    /// Policy distribution over tasks, when a policy ran this iteration.
    pub policy_probs: Option<Vec<f64>>,
    pub epsilon: f64,
}

/// Policy network plus its training state, for the `Rl` strategy.
pub struct RlComponents {
    pub net: PolicyNet,
    pub phi: ParameterVector,
    pub state: PolicyState,
    pub optimizer: OptimizerState,
    pub hp: RlHyperparams,
}

impl RlComponents {
    /// Fresh policy with AdamW (no weight decay) and zeroed recurrent state.
    pub fn fresh(net: PolicyNet, hp: RlHyperparams, seed: u64) -> Result<RlComponents> {
        hp.validate(net.config().num_tasks)?;
        let phi = net.init_params(rng::derive_seed(seed, "policy_init"));
        let state = PolicyState::initial(net.config());
        let optimizer = OptimizerState::adamw_with(
            hp.policy_lr,
            crate::optim::AdamWConfig {
                weight_decay: hp.policy_weight_decay,
                ..Default::default()
            },
        );
        Ok(RlComponents {
            net,
            phi,
            state,
            optimizer,
            hp,
        })
    }
}

/// Drives meta-training of a shared initialization over source tasks.
pub struct MetaRunner {
    model: ScoringModel,
    theta: ParameterVector,
    sources: Vec<TaskDataset>,
    target_train: TaskDataset,
    hp: MetaHyperparams,
    rule: MetaUpdateRule,
    strategy: WeightStrategy,
    episodes: EpisodeSampling,
    rl: Option<RlComponents>,
    seed: u64,
    iteration: usize,
    loss_history: Vec<f64>,
    stopped_early: bool,
}

impl MetaRunner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: ScoringModel,
        theta: ParameterVector,
        sources: Vec<TaskDataset>,
        target_train: TaskDataset,
        hp: MetaHyperparams,
        rule: MetaUpdateRule,
        strategy: WeightStrategy,
        episodes: EpisodeSampling,
        rl: Option<RlComponents>,
        seed: u64,
    ) -> Result<MetaRunner> {
        if sources.is_empty() {
            return Err(Error::EmptyBatch("no source tasks".into()));
        }
        let needs_all_sources = matches!(
            strategy,
            WeightStrategy::GreedyTopK | WeightStrategy::Rl | WeightStrategy::Temperature
        );
        if needs_all_sources && !matches!(episodes, EpisodeSampling::AllSources) {
            return Err(Error::ConfigError(
                "reward- and size-based strategies need one episode per source".into(),
            ));
        }
        match strategy {
            WeightStrategy::Rl => {
                let rl = rl
                    .as_ref()
                    .ok_or_else(|| Error::ConfigError("rl strategy without a policy".into()))?;
                if rl.net.config().num_tasks != sources.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "policy over {} tasks, {} sources",
                        rl.net.config().num_tasks,
                        sources.len()
                    )));
                }
            }
            _ => {
                if rl.is_some() {
                    return Err(Error::ConfigError(
                        "policy components supplied but the strategy never uses them".into(),
                    ));
                }
            }
        }
        if let EpisodeSampling::Temperature { omega } = episodes {
            if !(omega.is_finite() && omega > 0.0) {
                return Err(Error::ConfigError(format!("omega {omega} must be positive")));
            }
        }
        Ok(MetaRunner {
            model,
            theta,
            sources,
            target_train,
            hp,
            rule,
            strategy,
            episodes,
            rl,
            seed,
            iteration: 0,
            loss_history: Vec::new(),
            stopped_early: false,
        })
    }

    pub fn theta(&self) -> &ParameterVector {
        &self.theta
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn stopped_early(&self) -> bool {
        self.stopped_early
    }

    pub fn rl(&self) -> Option<&RlComponents> {
        self.rl.as_ref()
    }

    /// True once the iteration budget is spent or the early-stop criterion
    /// has fired.
    pub fn finished(&self) -> bool {
        self.stopped_early || self.iteration >= self.hp.max_iterations
    }

    fn tag(&self, name: &str) -> u64 {
        rng::derive_seed(self.seed, &format!("{name}/{}", self.iteration))
    }

    /// Which task each episode slot belongs to this iteration.
    fn slot_tasks(&self) -> Result<Vec<usize>> {
        let m = self.sources.len();
        match self.episodes {
            EpisodeSampling::AllSources => Ok((0..m).collect()),
            EpisodeSampling::Temperature { omega } => {
                let sizes: Vec<f64> = self.sources.iter().map(|s| s.len() as f64).collect();
                let probs = temperature_probs(&sizes, omega)?;
                let mut r = rng::stream(self.seed, &format!("tasks/{}", self.iteration));
                let mut slots = Vec::with_capacity(m);
                for _ in 0..m {
                    let mut u: f64 = rand::Rng::gen(&mut r);
                    let mut picked = m - 1;
                    for (i, p) in probs.iter().enumerate() {
                        u -= p;
                        if u <= 0.0 {
                            picked = i;
                            break;
                        }
                    }
                    slots.push(picked);
                }
                Ok(slots)
            }
        }
    }

    /// Runs one meta-iteration and advances the counter.
    pub fn step(&mut self) -> Result<IterationRecord> {
        if self.finished() {
            return Err(Error::ConfigError(
                "step() called on a finished runner".into(),
            ));
        }
        let m = self.sources.len();
        let iter = self.iteration;

        // Target batch and the pre-update loss on it. Every strategy
        // computes this so their stopping decisions line up.
        let batch = sample_target_batch(
            &self.target_train,
            self.hp.target_batch_size.min(self.target_train.len()),
            self.tag("target"),
        )?;
        let general_loss = self.model.choice_nll_loss(&self.theta, &batch)?;
        let accuracy = self.model.accuracy(&self.theta, &batch)?;

        // Adapt one branch per slot.
        let slots = self.slot_tasks()?;
        let mut branches: Vec<ParameterVector> = Vec::with_capacity(slots.len());
        let mut query_grads: Vec<Vec<f64>> = Vec::new();
        for (slot, &task) in slots.iter().enumerate() {
            let episode = sample_episode(
                &self.sources[task],
                self.hp.support_size,
                self.hp.query_size,
                self.tag(&format!("episode/{slot}")),
            )?;
            let obj = self.model.objective(&episode.support);
            let adapted = inner_adapt(&self.theta, &obj, self.hp.inner_steps, self.hp.inner_lr)?;
            if self.rule == MetaUpdateRule::QueryGradient {
                let qobj = self.model.objective(&episode.query);
                let (_, grad) = evaluate_with_gradients(&adapted, &qobj)?;
                query_grads.push(grad);
            }
            branches.push(adapted);
        }

        // Rewards, only for the strategies that read them.
        let needs_rewards = matches!(self.strategy, WeightStrategy::GreedyTopK | WeightStrategy::Rl);
        let rewards = if needs_rewards {
            let mut task_losses = Vec::with_capacity(m);
            for branch in &branches {
                task_losses.push(self.model.choice_nll_loss(branch, &batch)?);
            }
            Some(rl::compute_rewards(iter, general_loss, &task_losses)?.rewards)
        } else {
            None
        };

        // Weights over the slots.
        let mut epsilon = 0.0;
        let mut policy_probs = None;
        let slot_weights: Vec<f64> = match self.strategy {
            WeightStrategy::Uniform => vec![1.0 / slots.len() as f64; slots.len()],
            WeightStrategy::Random => {
                let mut r = rng::stream(self.seed, &format!("weights/{iter}"));
                rl::strategy_weights(
                    WeightStrategy::Random,
                    WeightContext {
                        num_tasks: slots.len(),
                        k: 0,
                        rewards: None,
                        dataset_sizes: None,
                        omega: None,
                        trajectories: None,
                        rng: Some(&mut r),
                    },
                )?
            }
            WeightStrategy::Temperature => {
                let sizes: Vec<f64> = self.sources.iter().map(|s| s.len() as f64).collect();
                match self.episodes {
                    EpisodeSampling::Temperature { omega } => rl::strategy_weights(
                        WeightStrategy::Temperature,
                        WeightContext {
                            num_tasks: m,
                            k: 0,
                            rewards: None,
                            dataset_sizes: Some(&sizes),
                            omega: Some(omega),
                            trajectories: None,
                            rng: None,
                        },
                    )?,
                    EpisodeSampling::AllSources => {
                        return Err(Error::ConfigError(
                            "temperature weights need an omega; use temperature episodes".into(),
                        ))
                    }
                }
            }
            WeightStrategy::GreedyTopK => {
                let rewards = rewards.as_deref().expect("greedy computes rewards");
                let k = self
                    .rl
                    .as_ref()
                    .map(|r| r.hp.trajectory_len)
                    .unwrap_or_else(|| (m / 2).max(1));
                rl::strategy_weights(
                    WeightStrategy::GreedyTopK,
                    WeightContext {
                        num_tasks: m,
                        k,
                        rewards: Some(rewards),
                        dataset_sizes: None,
                        omega: None,
                        trajectories: None,
                        rng: None,
                    },
                )?
            }
            WeightStrategy::Rl => {
                let rewards_v = rewards.as_deref().expect("rl computes rewards");
                let rl_parts = self.rl.as_mut().expect("validated in new()");
                let hp = rl_parts.hp.clone();
                epsilon = hp.epsilon.at(iter as u64);

                let pre_state = rl_parts.state.clone();
                let (probs, carried) = rl_parts.net.policy_step(&rl_parts.phi, &pre_state)?;

                let mut traj_rng = rng::stream(self.seed, &format!("traj/{iter}"));
                let mut trajectories = Vec::with_capacity(hp.n_trajectories);
                for _ in 0..hp.n_trajectories {
                    let mut t =
                        sample_trajectory(&probs, epsilon, hp.trajectory_len, &mut traj_rng)?;
                    t.reward = t.indices.iter().map(|i| rewards_v[*i]).sum();
                    trajectories.push(t);
                }
                let baseline = self_critic_baseline(&probs, rewards_v, hp.trajectory_len)?;
                rl::reinforce_update(
                    &rl_parts.net,
                    &mut rl_parts.phi,
                    &pre_state,
                    &trajectories,
                    rewards_v,
                    baseline,
                    epsilon,
                    hp.entropy_coef,
                    hp.normalize_advantages,
                    &mut rl_parts.optimizer,
                )?;

                let mut next = carried;
                next.set_prev_rewards(rewards_v)?;
                rl_parts.state = next;
                policy_probs = Some(probs);

                if hp.stub_uniform_weights {
                    vec![1.0 / m as f64; m]
                } else {
                    rl::estimate_weights(&trajectories, m)?
                }
            }
        };

        // Meta-update.
        self.theta = match self.rule {
            MetaUpdateRule::Interpolate => {
                weighted_update(&self.theta, &branches, &slot_weights, self.hp.meta_lr)?
            }
            MetaUpdateRule::QueryGradient => {
                query_grad_update(&self.theta, &query_grads, &slot_weights, self.hp.meta_lr)?
            }
        };

        // Fold slot weights into per-task weights for the record.
        let mut weights = vec![0.0; m];
        for (slot, &task) in slots.iter().enumerate() {
            weights[task] += slot_weights[slot];
        }

        self.loss_history.push(general_loss);
        self.iteration += 1;
        let w = self.hp.early_stop_window;
        if w > 0 && self.loss_history.len() >= 2 * w {
            let n = self.loss_history.len();
            let recent: f64 = self.loss_history[n - w..].iter().sum::<f64>() / w as f64;
            let previous: f64 = self.loss_history[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
            if previous - recent < self.hp.early_stop_tol {
                self.stopped_early = true;
            }
        }

        Ok(IterationRecord {
            iteration: iter,
            loss: general_loss,
            accuracy,
            weights,
            rewards,
            policy_probs,
            epsilon,
        })
    }

    /// Steps until [`finished`](Self::finished), collecting the records.
    pub fn run(&mut self) -> Result<Vec<IterationRecord>> {
        let mut records = Vec::new();
        while !self.finished() {
            records.push(self.step()?);
        }
        Ok(records)
    }
}

/// Convenience: loss and accuracy of `params` on a full instance set.
pub fn evaluate(
    model: &ScoringModel,
    params: &ParameterVector,
    instances: &[ChoiceInstance],
) -> Result<(f64, f64)> {
    Ok((
        model.choice_nll_loss(params, instances)?,
        model.accuracy(params, instances)?,
    ))
}
