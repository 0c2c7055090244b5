//! Multiple-choice scoring model.
//!
//! Each candidate answer is encoded to a feature vector, pushed through a
//! small tanh feed-forward encoder, and scored by a one-hidden-layer head:
//!
//! ```text
//! score(x) = w2 . tanh(W1 encode(x) + b1)
//! ```
//!
//! Candidate scores are normalized with a softmax to give an answer
//! distribution, and training minimizes mean negative log-likelihood of the
//! gold candidate over a batch.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamLayout, ParameterVector};
use crate::tape::{Objective, Tape, Val};

/// Encoder shape. `layers = 0` makes the encoder the identity map, which is
/// occasionally useful for hand-checkable tests; in that case the head reads
/// the raw `input_dim`-sized features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 32,
            hidden_dim: 64,
            layers: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::ConfigError(
                "encoder dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Dimension of the vector the scoring head consumes.
    pub fn encoded_dim(&self) -> usize {
        if self.layers == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }
}

/// One multiple-choice instance: a feature vector per candidate plus the
/// index of the gold candidate. Instances may disagree on candidate count
/// (each is scored independently), but not on feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceInstance {
    pub features: Vec<Vec<f64>>,
    pub label: usize,
}

impl ChoiceInstance {
    pub fn new(features: Vec<Vec<f64>>, label: usize) -> Result<ChoiceInstance> {
        if features.len() < 2 {
            return Err(Error::ConfigError(format!(
                "instance needs at least 2 candidates, got {}",
                features.len()
            )));
        }
        if label >= features.len() {
            return Err(Error::ConfigError(format!(
                "label {label} out of range for {} candidates",
                features.len()
            )));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::ShapeMismatch(
                "candidates disagree on feature dimension".into(),
            ));
        }
        Ok(ChoiceInstance { features, label })
    }

    pub fn n_candidates(&self) -> usize {
        self.features.len()
    }
}

/// Softmax over candidate scores. Errors on non-finite scores.
pub fn answer_distribution(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch("no scores".into()));
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::NonFiniteLoss(s));
        }
    }
    let mut out = vec![0.0; scores.len()];
    kernels::softmax(scores, &mut out);
    Ok(out)
}

/// Tape handles for the model's weight segments, sliced out of one flat
/// parameter leaf.
struct ParamView {
    encoder: Vec<(Val, Val)>, // (w, b) per layer
    head_w1: Val,
    head_b1: Val,
    head_w2: Val,
}

#[derive(Debug, Clone)]
pub struct ScoringModel {
    cfg: EncoderConfig,
    layout: Arc<ParamLayout>,
}

impl ScoringModel {
    pub fn new(cfg: EncoderConfig) -> Result<ScoringModel> {
        cfg.validate()?;
        let mut spec: Vec<(String, usize)> = Vec::new();
        let mut in_dim = cfg.input_dim;
        for l in 0..cfg.layers {
            spec.push((format!("encoder.w{l}"), cfg.hidden_dim * in_dim));
            spec.push((format!("encoder.b{l}"), cfg.hidden_dim));
            in_dim = cfg.hidden_dim;
        }
        let e = cfg.encoded_dim();
        spec.push(("head.w1".into(), cfg.hidden_dim * e));
        spec.push(("head.b1".into(), cfg.hidden_dim));
        spec.push(("head.w2".into(), cfg.hidden_dim));
        let spec_refs: Vec<(&str, usize)> =
            spec.iter().map(|(n, l)| (n.as_str(), *l)).collect();
        Ok(ScoringModel {
            cfg,
            layout: ParamLayout::build(&spec_refs)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Seeded uniform init, each segment scaled by 1/sqrt(fan_in).
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total_len()];
        let mut in_dim = self.cfg.input_dim;
        for l in 0..self.cfg.layers {
            let bound = 1.0 / (in_dim as f64).sqrt();
            fill_uniform(&mut rng, seg_mut(&self.layout, &mut values, &format!("encoder.w{l}")), bound);
            fill_uniform(&mut rng, seg_mut(&self.layout, &mut values, &format!("encoder.b{l}")), bound);
            in_dim = self.cfg.hidden_dim;
        }
        let bound = 1.0 / (self.cfg.encoded_dim() as f64).sqrt();
        fill_uniform(&mut rng, seg_mut(&self.layout, &mut values, "head.w1"), bound);
        fill_uniform(&mut rng, seg_mut(&self.layout, &mut values, "head.b1"), bound);
        let bound = 1.0 / (self.cfg.hidden_dim as f64).sqrt();
        fill_uniform(&mut rng, seg_mut(&self.layout, &mut values, "head.w2"), bound);
        ParameterVector::from_values(self.layout.clone(), values)
            .expect("init produces finite values")
    }

    fn view(&self, tape: &mut Tape, p: Val) -> Result<ParamView> {
        let seg = |tape: &mut Tape, name: &str| -> Result<Val> {
            let s = self.layout.segment(name)?;
            tape.slice(p, s.offset, s.len)
        };
        let mut encoder = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let w = seg(tape, &format!("encoder.w{l}"))?;
            let b = seg(tape, &format!("encoder.b{l}"))?;
            encoder.push((w, b));
        }
        Ok(ParamView {
            encoder,
            head_w1: seg(tape, "head.w1")?,
            head_b1: seg(tape, "head.b1")?,
            head_w2: seg(tape, "head.w2")?,
        })
    }

    /// Builds the score of one candidate on the tape.
    fn score_tape(&self, tape: &mut Tape, view: &ParamView, features: &[f64]) -> Result<Val> {
        if features.len() != self.cfg.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "candidate features have dim {}, model expects {}",
                features.len(),
                self.cfg.input_dim
            )));
        }
        let mut h = tape.leaf(features);
        let mut in_dim = self.cfg.input_dim;
        for (w, b) in &view.encoder {
            let z = tape.matvec(*w, h, self.cfg.hidden_dim, in_dim)?;
            let zb = tape.add(z, *b)?;
            h = tape.tanh(zb);
            in_dim = self.cfg.hidden_dim;
        }
        let z = tape.matvec(view.head_w1, h, self.cfg.hidden_dim, self.cfg.encoded_dim())?;
        let zb = tape.add(z, view.head_b1)?;
        let t = tape.tanh(zb);
        tape.dot(view.head_w2, t)
    }

    /// Plain forward pass (no tape) through the same kernels; bitwise equal
    /// to the tape path.
    pub fn score_candidates(
        &self,
        params: &ParameterVector,
        instance: &ChoiceInstance,
    ) -> Result<Vec<f64>> {
        if !Arc::ptr_eq(params.layout(), &self.layout) && params.layout() != &self.layout {
            return Err(Error::ShapeMismatch("parameter layout is not this model's".into()));
        }
        let mut scores = Vec::with_capacity(instance.features.len());
        for features in &instance.features {
            if features.len() != self.cfg.input_dim {
                return Err(Error::ShapeMismatch(format!(
                    "candidate features have dim {}, model expects {}",
                    features.len(),
                    self.cfg.input_dim
                )));
            }
            let mut h = features.clone();
            let mut in_dim = self.cfg.input_dim;
            for l in 0..self.cfg.layers {
                let w = params.segment_values(&format!("encoder.w{l}"))?;
                let b = params.segment_values(&format!("encoder.b{l}"))?;
                let mut z = vec![0.0; self.cfg.hidden_dim];
                kernels::matvec(w, &h, self.cfg.hidden_dim, in_dim, &mut z);
                for (zi, bi) in z.iter_mut().zip(b) {
                    *zi = (*zi + bi).tanh();
                }
                h = z;
                in_dim = self.cfg.hidden_dim;
            }
            let w1 = params.segment_values("head.w1")?;
            let b1 = params.segment_values("head.b1")?;
            let w2 = params.segment_values("head.w2")?;
            let mut z = vec![0.0; self.cfg.hidden_dim];
            kernels::matvec(w1, &h, self.cfg.hidden_dim, self.cfg.encoded_dim(), &mut z);
            for (zi, bi) in z.iter_mut().zip(b1) {
                *zi = (*zi + bi).tanh();
            }
            scores.push(kernels::dot(w2, &z));
        }
        Ok(scores)
    }

    /// Mean NLL of the gold candidates, built on the tape.
    pub fn batch_nll(&self, tape: &mut Tape, p: Val, batch: &[ChoiceInstance]) -> Result<Val> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("batch_nll over empty batch".into()));
        }
        let view = self.view(tape, p)?;
        let mut losses = Vec::with_capacity(batch.len());
        for inst in batch {
            let mut scores = Vec::with_capacity(inst.features.len());
            for f in &inst.features {
                scores.push(self.score_tape(tape, &view, f)?);
            }
            let stacked = tape.concat(&scores)?;
            losses.push(tape.softmax_nll(stacked, inst.label)?);
        }
        let all = tape.concat(&losses)?;
        tape.mean(all)
    }

    /// Mean NLL as a plain value, without gradient tracking. Pure: equal
    /// inputs give bitwise-equal output.
    pub fn choice_nll_loss(&self, params: &ParameterVector, batch: &[ChoiceInstance]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("choice_nll_loss over empty batch".into()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for inst in batch {
            let scores = self.score_candidates(params, inst)?;
            let (loss, _) = kernels::softmax_nll(&scores, inst.label);
            losses.push(loss);
        }
        let loss = kernels::mean(&losses);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        Ok(loss)
    }

    /// The batch NLL as a differentiable [`Objective`].
    pub fn objective<'a>(&'a self, batch: &'a [ChoiceInstance]) -> BatchNllObjective<'a> {
        BatchNllObjective { model: self, batch }
    }

    /// Fraction of instances whose highest-scoring candidate is the gold
    /// label (ties resolve to the lowest index).
    pub fn accuracy(&self, params: &ParameterVector, instances: &[ChoiceInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::EmptyBatch("accuracy over empty set".into()));
        }
        let mut hits = 0usize;
        for inst in instances {
            let scores = self.score_candidates(params, inst)?;
            if kernels::argmax(&scores) == inst.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / instances.len() as f64)
    }
}

pub struct BatchNllObjective<'a> {
    model: &'a ScoringModel,
    batch: &'a [ChoiceInstance],
}

impl Objective for BatchNllObjective<'_> {
    fn loss(&self, tape: &mut Tape, params: Val) -> Result<Val> {
        self.model.batch_nll(tape, params, self.batch)
    }
}

fn seg_mut<'a>(layout: &ParamLayout, values: &'a mut [f64], name: &str) -> &'a mut [f64] {
    let s = layout.segment(name).expect("segment exists");
    &mut values[s.offset..s.offset + s.len]
}

fn fill_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], bound: f64) {
    for v in out.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}
