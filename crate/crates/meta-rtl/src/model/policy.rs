//! Recurrent task-weighting policy network.
//!
//! Input at step `t` is the concatenation of the previous task distribution
//! `P` and the previous per-task rewards `r` (length `2M`). One LSTM step
//! produces a hidden vector; dot-product attention of that hidden vector
//! over a ring buffer of the last `W` hidden vectors (including the current
//! one) yields a context vector; a two-layer tanh feed-forward net over
//! `[hidden, context]` emits `M` logits, and a softmax turns them into the
//! new task distribution.
//!
//! With all-zero weights the LSTM hidden state stays zero and the logits are
//! zero, so the initial distribution is exactly uniform.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamLayout, ParameterVector};
use crate::tape::{Tape, Val};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyNetConfig {
    /// Number of source tasks `M`.
    pub num_tasks: usize,
    /// LSTM hidden/cell dimension.
    pub hidden_dim: usize,
    /// Attention window: how many recent hidden vectors are kept.
    pub window: usize,
    /// Hidden width of the output feed-forward net.
    pub ffn_hidden: usize,
}

impl Default for PolicyNetConfig {
    fn default() -> Self {
        PolicyNetConfig {
            num_tasks: 4,
            hidden_dim: 32,
            window: 8,
            ffn_hidden: 32,
        }
    }
}

impl PolicyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(Error::ConfigError(
                "policy needs at least 2 tasks to weight".into(),
            ));
        }
        if self.hidden_dim == 0 || self.window == 0 || self.ffn_hidden == 0 {
            return Err(Error::ConfigError(
                "policy dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Recurrent state carried across meta-iterations. Gradients are truncated
/// at iteration boundaries: the state is re-entered as constants.
///
/// After [`PolicyNet::policy_step`] the state holds the new distribution in
/// `prev_probs`; the caller must deposit the iteration's reward vector with
/// [`PolicyState::set_prev_rewards`] before the next step so the pair
/// `(P^{t-1}, r^{t-1})` stays aligned.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// Oldest-first ring of recent hidden vectors, at most `window` long.
    pub window: Vec<Vec<f64>>,
    pub prev_probs: Vec<f64>,
    pub prev_rewards: Vec<f64>,
}

impl PolicyState {
    /// Zero hidden/cell state, uniform distribution, zero rewards.
    pub fn initial(cfg: &PolicyNetConfig) -> PolicyState {
        PolicyState {
            h: vec![0.0; cfg.hidden_dim],
            c: vec![0.0; cfg.hidden_dim],
            window: Vec::new(),
            prev_probs: vec![1.0 / cfg.num_tasks as f64; cfg.num_tasks],
            prev_rewards: vec![0.0; cfg.num_tasks],
        }
    }

    pub fn set_prev_rewards(&mut self, rewards: &[f64]) -> Result<()> {
        if rewards.len() != self.prev_rewards.len() {
            return Err(Error::ShapeMismatch(format!(
                "reward vector of {} for {} tasks",
                rewards.len(),
                self.prev_rewards.len()
            )));
        }
        self.prev_rewards = rewards.to_vec();
        Ok(())
    }

    pub fn validate(&self, cfg: &PolicyNetConfig) -> Result<()> {
        if self.h.len() != cfg.hidden_dim
            || self.c.len() != cfg.hidden_dim
            || self.prev_probs.len() != cfg.num_tasks
            || self.prev_rewards.len() != cfg.num_tasks
        {
            return Err(Error::ShapeMismatch("policy state dims".into()));
        }
        if self.window.len() > cfg.window {
            return Err(Error::ShapeMismatch("window overfull".into()));
        }
        let sum: f64 = self.prev_probs.iter().sum();
        if self.prev_probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateDistribution(format!(
                "prev_probs sum to {sum}"
            )));
        }
        Ok(())
    }
}

/// Tape-resident policy state: the same fields as [`PolicyState`] but as
/// live tape values, so steps can be chained differentiably.
pub struct PolicyStateVals {
    pub h: Val,
    pub c: Val,
    pub window: Vec<Val>,
    pub prev_probs: Val,
    pub prev_rewards: Val,
}

struct PolicyView {
    w_ih: Val,
    w_hh: Val,
    b: Val,
    ffn_w1: Val,
    ffn_b1: Val,
    ffn_w2: Val,
    ffn_b2: Val,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    cfg: PolicyNetConfig,
    layout: Arc<ParamLayout>,
}

impl PolicyNet {
    pub fn new(cfg: PolicyNetConfig) -> Result<PolicyNet> {
        cfg.validate()?;
        let (m, r, f) = (cfg.num_tasks, cfg.hidden_dim, cfg.ffn_hidden);
        let layout = ParamLayout::build(&[
            ("lstm.w_ih", 4 * r * 2 * m),
            ("lstm.w_hh", 4 * r * r),
            ("lstm.b", 4 * r),
            ("ffn.w1", f * 2 * r),
            ("ffn.b1", f),
            ("ffn.w2", m * f),
            ("ffn.b2", m),
        ])?;
        Ok(PolicyNet { cfg, layout })
    }

    pub fn config(&self) -> &PolicyNetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Seeded uniform init in [-0.08, 0.08] for every segment.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..self.layout.total_len())
            .map(|_| rng.gen_range(-0.08..0.08))
            .collect();
        ParameterVector::from_values(self.layout.clone(), values)
            .expect("init produces finite values")
    }

    fn view(&self, tape: &mut Tape, phi: Val) -> Result<PolicyView> {
        let mut seg = |name: &str| -> Result<Val> {
            let s = self.layout.segment(name)?;
            tape.slice(phi, s.offset, s.len)
        };
        Ok(PolicyView {
            w_ih: seg("lstm.w_ih")?,
            w_hh: seg("lstm.w_hh")?,
            b: seg("lstm.b")?,
            ffn_w1: seg("ffn.w1")?,
            ffn_b1: seg("ffn.b1")?,
            ffn_w2: seg("ffn.w2")?,
            ffn_b2: seg("ffn.b2")?,
        })
    }

    /// Loads a [`PolicyState`] onto the tape as constant leaves.
    pub fn state_to_vals(&self, tape: &mut Tape, state: &PolicyState) -> Result<PolicyStateVals> {
        state.validate(&self.cfg)?;
        Ok(PolicyStateVals {
            h: tape.leaf(&state.h),
            c: tape.leaf(&state.c),
            window: state.window.iter().map(|w| tape.leaf(w)).collect(),
            prev_probs: tape.leaf(&state.prev_probs),
            prev_rewards: tape.leaf(&state.prev_rewards),
        })
    }

    /// One differentiable policy step. Returns the new task distribution and
    /// the advanced state (which reuses the incoming `prev_rewards` handle;
    /// chained callers swap in the next reward leaf themselves).
    pub fn step_tape(
        &self,
        tape: &mut Tape,
        phi: Val,
        state: &PolicyStateVals,
    ) -> Result<(Val, PolicyStateVals)> {
        let (m, r, f) = (self.cfg.num_tasks, self.cfg.hidden_dim, self.cfg.ffn_hidden);
        let view = self.view(tape, phi)?;

        // LSTM cell, gate order (input, forget, cell, output).
        let u = tape.concat(&[state.prev_probs, state.prev_rewards])?;
        let zx = tape.matvec(view.w_ih, u, 4 * r, 2 * m)?;
        let zh = tape.matvec(view.w_hh, state.h, 4 * r, r)?;
        let zxh = tape.add(zx, zh)?;
        let z = tape.add(zxh, view.b)?;
        let zi = tape.slice(z, 0, r)?;
        let zf = tape.slice(z, r, r)?;
        let zg = tape.slice(z, 2 * r, r)?;
        let zo = tape.slice(z, 3 * r, r)?;
        let gate_i = tape.sigmoid(zi);
        let gate_f = tape.sigmoid(zf);
        let gate_g = tape.tanh(zg);
        let gate_o = tape.sigmoid(zo);
        let fc = tape.mul(gate_f, state.c)?;
        let ig = tape.mul(gate_i, gate_g)?;
        let c_new = tape.add(fc, ig)?;
        let c_tanh = tape.tanh(c_new);
        let h_new = tape.mul(gate_o, c_tanh)?;

        // Ring buffer advances, then the current hidden attends over it.
        let mut window: Vec<Val> = state.window.clone();
        window.push(h_new);
        if window.len() > self.cfg.window {
            window.remove(0);
        }
        let mut scores = Vec::with_capacity(window.len());
        for w in &window {
            scores.push(tape.dot(h_new, *w)?);
        }
        let score_vec = tape.concat(&scores)?;
        let alpha = tape.softmax(score_vec);
        let mut context: Option<Val> = None;
        for (k, w) in window.iter().enumerate() {
            let ak = tape.slice(alpha, k, 1)?;
            let term = tape.mul_scalar(ak, *w)?;
            context = Some(match context {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let context = context.expect("window is never empty after push");

        // Two-layer FFN over [hidden, context] -> M logits -> softmax.
        let hc = tape.concat(&[h_new, context])?;
        let z1 = tape.matvec(view.ffn_w1, hc, f, 2 * r)?;
        let z1b = tape.add(z1, view.ffn_b1)?;
        let a1 = tape.tanh(z1b);
        let z2 = tape.matvec(view.ffn_w2, a1, m, f)?;
        let logits = tape.add(z2, view.ffn_b2)?;
        let probs = tape.softmax(logits);

        Ok((
            probs,
            PolicyStateVals {
                h: h_new,
                c: c_new,
                window,
                prev_probs: probs,
                prev_rewards: state.prev_rewards,
            },
        ))
    }

    /// Value-mode step: runs [`PolicyNet::step_tape`] on a throwaway tape and
    /// extracts plain vectors. The returned state holds the new distribution;
    /// rewards must be deposited by the caller (see [`PolicyState`]).
    pub fn policy_step(
        &self,
        phi: &ParameterVector,
        state: &PolicyState,
    ) -> Result<(Vec<f64>, PolicyState)> {
        if phi.layout() != &self.layout {
            return Err(Error::ShapeMismatch(
                "parameter layout is not this policy's".into(),
            ));
        }
        let mut tape = Tape::new();
        let p = tape.leaf(phi.values());
        let sv = self.state_to_vals(&mut tape, state)?;
        let (probs, new_sv) = self.step_tape(&mut tape, p, &sv)?;
        let probs_out = tape.value(probs).to_vec();
        for v in &probs_out {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(*v));
            }
        }
        Ok((
            probs_out.clone(),
            PolicyState {
                h: tape.value(new_sv.h).to_vec(),
                c: tape.value(new_sv.c).to_vec(),
                window: new_sv.window.iter().map(|w| tape.value(*w).to_vec()).collect(),
                prev_probs: probs_out,
                prev_rewards: state.prev_rewards.clone(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PolicyNetConfig {
        PolicyNetConfig {
            num_tasks: 3,
            hidden_dim: 4,
            window: 2,
            ffn_hidden: 4,
        }
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let net = PolicyNet::new(small_cfg()).unwrap();
        let phi = ParameterVector::zeros(net.layout().clone());
        let state = PolicyState::initial(net.config());
        let (probs, new_state) = net.policy_step(&phi, &state).unwrap();
        for p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(new_state.window.len(), 1);
        assert!(new_state.h.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn distribution_is_on_the_simplex() {
        let net = PolicyNet::new(small_cfg()).unwrap();
        let phi = net.init_params(3);
        let mut state = PolicyState::initial(net.config());
        for step in 0..5 {
            let (probs, mut next) = net.policy_step(&phi, &state).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "step {step}: sum {sum}");
            assert!(probs.iter().all(|p| *p > 0.0));
            next.set_prev_rewards(&[0.1 * step as f64, -0.05, 0.2]).unwrap();
            state = next;
        }
        assert_eq!(state.window.len(), 2, "ring buffer capped at W");
    }

    #[test]
    fn same_inputs_same_distribution() {
        let net = PolicyNet::new(small_cfg()).unwrap();
        let phi = net.init_params(9);
        let state = PolicyState::initial(net.config());
        let (p1, _) = net.policy_step(&phi, &state).unwrap();
        let (p2, _) = net.policy_step(&phi, &state).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
    }

    #[test]
    fn invalid_state_is_rejected() {
        let net = PolicyNet::new(small_cfg()).unwrap();
        let phi = net.init_params(1);
        let mut state = PolicyState::initial(net.config());
        state.prev_probs = vec![0.9, 0.9, -0.8];
        assert!(net.policy_step(&phi, &state).is_err());
    }
}
