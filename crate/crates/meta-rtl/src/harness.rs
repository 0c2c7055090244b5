//! Experiment harness: JSON run configs, dataset assembly, the method
//! roster, per-seed training runs, metrics/summary emission, and pairwise
//! transferability matrices.
//!
//! Outputs of one run:
//!
//! * `metrics.csv` — header
//!   `method,seed,iteration,split,loss,accuracy,C_0..C_{M-1},r_0..r_{M-1},epsilon,ms`,
//!   one `train` row per training iteration, a `dev` row every `log_every`
//!   iterations, and one `final` row per seed after transfer fine-tuning.
//!   With `deterministic_timing` (the default) the `ms` column is zero and
//!   reruns of the same config are byte-identical.
//! * `summary.json` — per-seed finals plus mean/std aggregates.
//! * `timings.json` — real wall-clock stage timings, deliberately kept out
//!   of the deterministic surface.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{
    transfer_finetune, EpisodeSampling, MetaHyperparams, MetaRunner, MetaUpdateRule, RlComponents,
};
use crate::model::{ChoiceInstance, EncoderConfig, PolicyNet, PolicyNetConfig, ScoringModel};
use crate::optim::OptimizerState;
use crate::params::ParameterVector;
use crate::rl::{RlHyperparams, WeightStrategy};
use crate::rng;
use crate::tape::evaluate_with_gradients;
use crate::tasks::{
    load_jsonl, sample_target_batch, subsample_fraction,
    synthetic::{make_synthetic_family, random_unit_vector, SyntheticFamilySpec},
    TaskDataset,
};

/// The training methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Fine-tune a fresh initialization on the target training data only.
    TargetFinetune,
    /// Supervised training on all source tasks pooled, then transfer.
    TaskComb,
    /// Uniform interpolation meta-learning over all sources.
    Reptile,
    /// Like `reptile`, but episodes drawn by size-temperature sampling.
    TempReptile,
    /// Uniform first-order query-gradient meta-learning.
    Fomaml,
    /// Like `fomaml`, with size-temperature episode sampling.
    TempFomaml,
    /// Interpolation with fresh Dirichlet(1,...,1) weights each iteration.
    Random,
    /// Interpolation weighted toward the currently best-rewarded tasks.
    Greedy,
    /// Policy-weighted interpolation (the full reinforced pipeline).
    MetaRtlReptile,
    /// Policy-weighted query-gradient updates.
    MetaRtlFomaml,
}

pub const ALL_METHODS: [Method; 10] = [
    Method::TargetFinetune,
    Method::TaskComb,
    Method::Reptile,
    Method::TempReptile,
    Method::Fomaml,
    Method::TempFomaml,
    Method::Random,
    Method::Greedy,
    Method::MetaRtlReptile,
    Method::MetaRtlFomaml,
];

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::TargetFinetune => "target_finetune",
            Method::TaskComb => "task_comb",
            Method::Reptile => "reptile",
            Method::TempReptile => "temp_reptile",
            Method::Fomaml => "fomaml",
            Method::TempFomaml => "temp_fomaml",
            Method::Random => "random",
            Method::Greedy => "greedy",
            Method::MetaRtlReptile => "meta_rtl_reptile",
            Method::MetaRtlFomaml => "meta_rtl_fomaml",
        }
    }

}

/// Where the tasks come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Procedurally generated candidate-scoring families sharing a
    /// reference concept.
    Synthetic {
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_n_candidates")]
        n_candidates: usize,
        /// Concept correlation of each source family to the target concept.
        #[serde(default = "default_source_rhos")]
        source_rhos: Vec<f64>,
        #[serde(default = "default_source_size")]
        source_size: usize,
        #[serde(default = "default_target_train_size")]
        target_train_size: usize,
        #[serde(default = "default_target_dev_size")]
        target_dev_size: usize,
        /// Label-noise rate of the source families.
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        /// Label-noise rate of the target task.
        #[serde(default)]
        target_label_noise: f64,
        /// Seed of the data itself, shared by every run seed.
        #[serde(default)]
        data_seed: u64,
    },
    /// Multiple-choice records from JSONL files, embedded by feature
    /// hashing.
    Jsonl {
        sources: Vec<PathBuf>,
        target_train: PathBuf,
        target_dev: PathBuf,
        #[serde(default = "default_hash_dim")]
        hash_dim: usize,
    },
}

fn default_input_dim() -> usize {
    32
}
fn default_n_candidates() -> usize {
    4
}
fn default_source_rhos() -> Vec<f64> {
    vec![0.9, 0.6, 0.3, 0.0]
}
fn default_source_size() -> usize {
    2000
}
fn default_target_train_size() -> usize {
    200
}
fn default_target_dev_size() -> usize {
    500
}
fn default_label_noise() -> f64 {
    0.1
}
fn default_hash_dim() -> usize {
    512
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            input_dim: default_input_dim(),
            n_candidates: default_n_candidates(),
            source_rhos: default_source_rhos(),
            source_size: default_source_size(),
            target_train_size: default_target_train_size(),
            target_dev_size: default_target_dev_size(),
            label_noise: default_label_noise(),
            target_label_noise: 0.0,
            data_seed: 0,
        }
    }
}

impl DataSpec {
    pub fn num_sources(&self) -> usize {
        match self {
            DataSpec::Synthetic { source_rhos, .. } => source_rhos.len(),
            DataSpec::Jsonl { sources, .. } => sources.len(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            DataSpec::Synthetic { input_dim, .. } => *input_dim,
            DataSpec::Jsonl { hash_dim, .. } => *hash_dim,
        }
    }
}

/// Encoder shape; the input dimension always comes from the data spec.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            layers: 2,
        }
    }
}

/// Policy network shape; the task count always comes from the data spec.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
    pub window: usize,
    pub ffn_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden_dim: 32,
            window: 8,
            ffn_hidden: 32,
        }
    }
}

/// A complete experiment description, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub meta: MetaHyperparams,
    pub rl: RlHyperparams,
    pub seeds: Vec<u64>,
    /// Temperature for the `temp_*` methods' episode sampling.
    pub omega: f64,
    /// Keep only this fraction of the target training set (low-resource
    /// simulations).
    pub target_train_fraction: f64,
    /// Write `ms = 0` in metrics rows so reruns are byte-identical; real
    /// timings always go to `timings.json`.
    pub deterministic_timing: bool,
    /// Evaluate on the dev set every this many iterations.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Reptile,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            policy: PolicyConfig::default(),
            meta: MetaHyperparams::default(),
            rl: RlHyperparams::default(),
            seeds: vec![0],
            omega: 2.0,
            target_train_fraction: 1.0,
            deterministic_timing: true,
            log_every: 50,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.rl.validate(self.data.num_sources().max(2))?;
        if self.seeds.is_empty() {
            return Err(Error::ConfigError("seeds must be non-empty".into()));
        }
        if self.data.num_sources() == 0 {
            return Err(Error::ConfigError("data spec lists no source tasks".into()));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::ConfigError(format!(
                "omega {} must be positive",
                self.omega
            )));
        }
        if !(self.target_train_fraction > 0.0 && self.target_train_fraction <= 1.0) {
            return Err(Error::ConfigError(format!(
                "target_train_fraction {} outside (0, 1]",
                self.target_train_fraction
            )));
        }
        if self.log_every == 0 {
            return Err(Error::ConfigError("log_every must be positive".into()));
        }
        if self.model.hidden_dim == 0 {
            return Err(Error::ConfigError("model.hidden_dim must be positive".into()));
        }
        if let DataSpec::Synthetic {
            source_rhos,
            label_noise,
            target_label_noise,
            ..
        } = &self.data
        {
            if source_rhos.iter().any(|r| !(-1.0..=1.0).contains(r)) {
                return Err(Error::ConfigError("source_rhos outside [-1, 1]".into()));
            }
            for noise in [label_noise, target_label_noise] {
                if !(0.0..0.5).contains(noise) {
                    return Err(Error::ConfigError(format!(
                        "label noise {noise} outside [0, 0.5)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::ConfigError(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sources, target training set, and target dev set for one experiment.
pub struct ExperimentData {
    pub sources: Vec<TaskDataset>,
    pub target_train: TaskDataset,
    pub target_dev: TaskDataset,
}

/// Materializes the datasets a config describes. Synthetic families and the
/// JSONL loader are both deterministic, so every run seed sees identical
/// data.
pub fn build_data(spec: &DataSpec) -> Result<ExperimentData> {
    match spec {
        DataSpec::Synthetic {
            input_dim,
            n_candidates,
            source_rhos,
            source_size,
            target_train_size,
            target_dev_size,
            label_noise,
            target_label_noise,
            data_seed,
        } => {
            let mut r = rng::stream(*data_seed, "reference_concept");
            let reference = random_unit_vector(*input_dim, &mut r);
            let family = |id: &str, rho: f64, noise: f64, n: usize| SyntheticFamilySpec {
                family_id: id.to_string(),
                input_dim: *input_dim,
                n_candidates: *n_candidates,
                reference_concept: reference.clone(),
                rho_rel: rho,
                label_noise: noise,
                instances: n,
            };
            let mut sources = Vec::with_capacity(source_rhos.len());
            for (i, rho) in source_rhos.iter().enumerate() {
                let spec = family(&format!("source_{i}"), *rho, *label_noise, *source_size);
                sources.push(make_synthetic_family(&spec, *data_seed)?.0);
            }
            let target_train = make_synthetic_family(
                &family("target_train", 1.0, *target_label_noise, *target_train_size),
                *data_seed,
            )?
            .0;
            let target_dev = make_synthetic_family(
                &family("target_dev", 1.0, *target_label_noise, *target_dev_size),
                *data_seed,
            )?
            .0;
            Ok(ExperimentData {
                sources,
                target_train,
                target_dev,
            })
        }
        DataSpec::Jsonl {
            sources,
            target_train,
            target_dev,
            hash_dim,
        } => {
            let mut loaded = Vec::with_capacity(sources.len());
            for path in sources {
                loaded.push(load_jsonl(path, *hash_dim)?);
            }
            Ok(ExperimentData {
                sources: loaded,
                target_train: load_jsonl(target_train, *hash_dim)?,
                target_dev: load_jsonl(target_dev, *hash_dim)?,
            })
        }
    }
}

/// One `metrics.csv` row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub method: &'static str,
    pub seed: u64,
    pub iteration: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub weights: Vec<f64>,
    pub rewards: Vec<f64>,
    pub epsilon: f64,
    pub ms: u128,
}

pub fn metrics_header(num_sources: usize) -> String {
    let mut cols = vec![
        "method".to_string(),
        "seed".to_string(),
        "iteration".to_string(),
        "split".to_string(),
        "loss".to_string(),
        "accuracy".to_string(),
    ];
    for i in 0..num_sources {
        cols.push(format!("C_{i}"));
    }
    for i in 0..num_sources {
        cols.push(format!("r_{i}"));
    }
    cols.push("epsilon".to_string());
    cols.push("ms".to_string());
    cols.join(",")
}

fn format_row(row: &MetricsRow) -> String {
    let mut cols = vec![
        row.method.to_string(),
        row.seed.to_string(),
        row.iteration.to_string(),
        row.split.to_string(),
        row.loss.to_string(),
        row.accuracy.to_string(),
    ];
    for w in &row.weights {
        cols.push(w.to_string());
    }
    for r in &row.rewards {
        cols.push(r.to_string());
    }
    cols.push(row.epsilon.to_string());
    cols.push(row.ms.to_string());
    cols.join(",")
}

/// Serializes rows to CSV text (header included).
pub fn metrics_csv(rows: &[MetricsRow], num_sources: usize) -> String {
    let mut out = String::new();
    out.push_str(&metrics_header(num_sources));
    out.push('\n');
    for row in rows {
        out.push_str(&format_row(row));
        out.push('\n');
    }
    out
}

/// Result of one seed's full training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub final_dev_loss: f64,
    pub final_dev_accuracy: f64,
    /// Best dev accuracy seen at any logged evaluation, final included.
    pub best_dev_accuracy: f64,
}

/// Mean/population-std aggregates over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seeds: usize,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub best_accuracy_mean: f64,
    pub best_accuracy_std: f64,
    pub final_loss_mean: f64,
    pub per_seed: Vec<SeedOutcome>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Wall-clock stage timings for one seed, in milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub train_ms: u128,
    pub transfer_ms: u128,
    pub eval_ms: u128,
}

/// Everything a run produced, before any files are written.
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub timings: Vec<SeedTiming>,
    pub num_sources: usize,
    /// Final post-transfer parameters per seed.
    pub final_params: Vec<(u64, ParameterVector)>,
}

/// Plain SGD over batches from one dataset, logging a `train` row per step
/// batch loss before the step, and a `dev` row every `log_every` steps.
#[allow(clippy::too_many_arguments)]
struct SupervisedPhase<'a> {
    model: &'a ScoringModel,
    dataset: &'a TaskDataset,
    dev: &'a TaskDataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    tag: &'a str,
    log_every: usize,
    method: &'static str,
    run_seed: u64,
    num_sources: usize,
}

impl SupervisedPhase<'_> {
    fn run(&self, params: &ParameterVector, rows: &mut Vec<MetricsRow>) -> Result<(ParameterVector, f64)> {
        let mut current = params.clone();
        let mut opt = OptimizerState::sgd(self.lr);
        let mut best_dev_acc = f64::NEG_INFINITY;
        let zeros = vec![0.0; self.num_sources];
        for step in 0..self.steps {
            let batch = sample_target_batch(
                self.dataset,
                self.batch_size.min(self.dataset.len()),
                rng::derive_seed(self.seed, &format!("{}/{step}", self.tag)),
            )?;
            let obj = self.model.objective(&batch);
            let (loss, grad) = evaluate_with_gradients(&current, &obj)?;
            let accuracy = self.model.accuracy(&current, &batch)?;
            rows.push(MetricsRow {
                method: self.method,
                seed: self.run_seed,
                iteration: step,
                split: "train",
                loss,
                accuracy,
                weights: zeros.clone(),
                rewards: zeros.clone(),
                epsilon: 0.0,
                ms: 0,
            });
            if step % self.log_every == 0 {
                let (dl, da) = crate::meta::evaluate(self.model, &current, &self.dev.instances)?;
                best_dev_acc = best_dev_acc.max(da);
                rows.push(MetricsRow {
                    method: self.method,
                    seed: self.run_seed,
                    iteration: step,
                    split: "dev",
                    loss: dl,
                    accuracy: da,
                    weights: zeros.clone(),
                    rewards: zeros.clone(),
                    epsilon: 0.0,
                    ms: 0,
                });
            }
            opt.step(&mut current, &grad)?;
        }
        Ok((current, best_dev_acc))
    }
}

fn run_one_seed(
    cfg: &RunConfig,
    data: &ExperimentData,
    seed: u64,
    rows: &mut Vec<MetricsRow>,
) -> Result<(SeedOutcome, SeedTiming, ParameterVector)> {
    let m = data.sources.len();
    let method = cfg.method.label();
    let encoder = EncoderConfig {
        input_dim: cfg.data.feature_dim(),
        hidden_dim: cfg.model.hidden_dim,
        layers: cfg.model.layers,
    };
    let model = ScoringModel::new(encoder)?;
    let theta0 = model.init_params(rng::derive_seed(seed, "theta"));

    let target_train = if cfg.target_train_fraction < 1.0 {
        subsample_fraction(
            &data.target_train,
            cfg.target_train_fraction,
            rng::derive_seed(seed, "target_subsample"),
        )?
    } else {
        data.target_train.clone()
    };

    let train_started = Instant::now();
    let mut best_dev_acc = f64::NEG_INFINITY;
    let mut iterations_run = 0;
    let mut stopped_early = false;

    let pre_transfer = match cfg.method {
        Method::TargetFinetune => theta0,
        Method::TaskComb => {
            let pooled: Vec<ChoiceInstance> = data
                .sources
                .iter()
                .flat_map(|s| s.instances.iter().cloned())
                .collect();
            let pooled = TaskDataset::new("pooled_sources", pooled)?;
            let phase = SupervisedPhase {
                model: &model,
                dataset: &pooled,
                dev: &data.target_dev,
                steps: cfg.meta.max_iterations,
                batch_size: cfg.meta.target_batch_size,
                lr: cfg.meta.inner_lr,
                seed,
                tag: "multitask",
                log_every: cfg.log_every,
                method,
                run_seed: seed,
                num_sources: m,
            };
            let (trained, best) = phase.run(&theta0, rows)?;
            best_dev_acc = best_dev_acc.max(best);
            iterations_run = cfg.meta.max_iterations;
            trained
        }
        _ => {
            let (rule, strategy, episodes) = match cfg.method {
                Method::Reptile => (
                    MetaUpdateRule::Interpolate,
                    WeightStrategy::Uniform,
                    EpisodeSampling::AllSources,
                ),
                Method::TempReptile => (
                    MetaUpdateRule::Interpolate,
                    WeightStrategy::Uniform,
                    EpisodeSampling::Temperature { omega: cfg.omega },
                ),
                Method::Fomaml => (
                    MetaUpdateRule::QueryGradient,
                    WeightStrategy::Uniform,
                    EpisodeSampling::AllSources,
                ),
                Method::TempFomaml => (
                    MetaUpdateRule::QueryGradient,
                    WeightStrategy::Uniform,
                    EpisodeSampling::Temperature { omega: cfg.omega },
                ),
                Method::Random => (
                    MetaUpdateRule::Interpolate,
                    WeightStrategy::Random,
                    EpisodeSampling::AllSources,
                ),
                Method::Greedy => (
                    MetaUpdateRule::Interpolate,
                    WeightStrategy::GreedyTopK,
                    EpisodeSampling::AllSources,
                ),
                Method::MetaRtlReptile => (
                    MetaUpdateRule::Interpolate,
                    WeightStrategy::Rl,
                    EpisodeSampling::AllSources,
                ),
                Method::MetaRtlFomaml => (
                    MetaUpdateRule::QueryGradient,
                    WeightStrategy::Rl,
                    EpisodeSampling::AllSources,
                ),
                Method::TargetFinetune | Method::TaskComb => unreachable!(),
            };
            let rl = if strategy == WeightStrategy::Rl {
                let net = PolicyNet::new(PolicyNetConfig {
                    num_tasks: m,
                    hidden_dim: cfg.policy.hidden_dim,
                    window: cfg.policy.window,
                    ffn_hidden: cfg.policy.ffn_hidden,
                })?;
                Some(RlComponents::fresh(net, cfg.rl.clone(), seed)?)
            } else {
                None
            };
            let mut runner = MetaRunner::new(
                model.clone(),
                theta0,
                data.sources.clone(),
                target_train.clone(),
                cfg.meta.clone(),
                rule,
                strategy,
                episodes,
                rl,
                seed,
            )?;
            while !runner.finished() {
                let rec = runner.step()?;
                rows.push(MetricsRow {
                    method,
                    seed,
                    iteration: rec.iteration,
                    split: "train",
                    loss: rec.loss,
                    accuracy: rec.accuracy,
                    weights: rec.weights.clone(),
                    rewards: rec.rewards.clone().unwrap_or_else(|| vec![0.0; m]),
                    epsilon: rec.epsilon,
                    ms: 0,
                });
                if rec.iteration % cfg.log_every == 0 {
                    let (dl, da) =
                        crate::meta::evaluate(&model, runner.theta(), &data.target_dev.instances)?;
                    best_dev_acc = best_dev_acc.max(da);
                    rows.push(MetricsRow {
                        method,
                        seed,
                        iteration: rec.iteration,
                        split: "dev",
                        loss: dl,
                        accuracy: da,
                        weights: rec.weights,
                        rewards: rec.rewards.unwrap_or_else(|| vec![0.0; m]),
                        epsilon: rec.epsilon,
                        ms: 0,
                    });
                }
            }
            iterations_run = runner.iteration();
            stopped_early = runner.stopped_early();
            runner.theta().clone()
        }
    };
    let train_ms = train_started.elapsed().as_millis();

    let transfer_started = Instant::now();
    let tuned = transfer_finetune(
        &model,
        &pre_transfer,
        &target_train,
        cfg.meta.transfer_batches,
        cfg.meta.transfer_batch_size,
        cfg.meta.transfer_lr,
        rng::derive_seed(seed, "transfer"),
    )?;
    let transfer_ms = transfer_started.elapsed().as_millis();

    let eval_started = Instant::now();
    let (final_loss, final_acc) = crate::meta::evaluate(&model, &tuned, &data.target_dev.instances)?;
    let eval_ms = eval_started.elapsed().as_millis();
    best_dev_acc = best_dev_acc.max(final_acc);

    rows.push(MetricsRow {
        method,
        seed,
        iteration: iterations_run,
        split: "final",
        loss: final_loss,
        accuracy: final_acc,
        weights: vec![0.0; m],
        rewards: vec![0.0; m],
        epsilon: 0.0,
        ms: 0,
    });

    Ok((
        SeedOutcome {
            seed,
            iterations_run,
            stopped_early,
            final_dev_loss: final_loss,
            final_dev_accuracy: final_acc,
            best_dev_accuracy: best_dev_acc,
        },
        SeedTiming {
            seed,
            train_ms,
            transfer_ms,
            eval_ms,
        },
        tuned,
    ))
}

/// Runs the configured method over every seed. Pure computation: writing
/// the outputs to disk is [`write_outputs`]' job.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = build_data(&cfg.data)?;
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    let mut timings = Vec::new();
    let mut final_params = Vec::new();
    for &seed in &cfg.seeds {
        let (outcome, timing, tuned) = run_one_seed(cfg, &data, seed, &mut rows)?;
        outcomes.push(outcome);
        timings.push(timing);
        final_params.push((seed, tuned));
    }
    let finals: Vec<f64> = outcomes.iter().map(|o| o.final_dev_accuracy).collect();
    let bests: Vec<f64> = outcomes.iter().map(|o| o.best_dev_accuracy).collect();
    let losses: Vec<f64> = outcomes.iter().map(|o| o.final_dev_loss).collect();
    let (fam, fas) = mean_std(&finals);
    let (bam, bas) = mean_std(&bests);
    let (flm, _) = mean_std(&losses);
    let summary = Summary {
        method: cfg.method.label().to_string(),
        seeds: outcomes.len(),
        final_accuracy_mean: fam,
        final_accuracy_std: fas,
        best_accuracy_mean: bam,
        best_accuracy_std: bas,
        final_loss_mean: flm,
        per_seed: outcomes,
    };
    Ok(ExperimentResult {
        rows,
        summary,
        timings,
        num_sources: data.sources.len(),
        final_params,
    })
}

#[derive(Serialize)]
struct ParamsDump<'a> {
    seed: u64,
    segments: Vec<(&'a str, usize, usize)>,
    values: &'a [f64],
}

/// Writes `metrics.csv`, `summary.json`, `timings.json`, and per-seed
/// `params_seed{N}.json` under `out_dir`, creating it if needed.
pub fn write_outputs(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("metrics.csv"),
        metrics_csv(&result.rows, result.num_sources),
    )?;
    let summary = serde_json::to_string_pretty(&result.summary)
        .map_err(|e| Error::ConfigError(format!("summary serialization: {e}")))?;
    fs::write(out_dir.join("summary.json"), summary + "\n")?;
    let timings = serde_json::to_string_pretty(&result.timings)
        .map_err(|e| Error::ConfigError(format!("timing serialization: {e}")))?;
    fs::write(out_dir.join("timings.json"), timings + "\n")?;
    for (seed, params) in &result.final_params {
        let dump = ParamsDump {
            seed: *seed,
            segments: params
                .layout()
                .segments()
                .iter()
                .map(|s| (s.name.as_str(), s.offset, s.len))
                .collect(),
            values: params.values(),
        };
        let text = serde_json::to_string(&dump)
            .map_err(|e| Error::ConfigError(format!("params serialization: {e}")))?;
        fs::write(out_dir.join(format!("params_seed{seed}.json")), text + "\n")?;
    }
    Ok(())
}

/// Mean dev-accuracy gain of pretraining on task `i` before fine-tuning on
/// task `j`, relative to fine-tuning on `j` alone. Row `i`, column `j`;
/// the diagonal is identically zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferabilityMatrix {
    pub task_names: Vec<String>,
    /// `values[i][j]`: benefit of `i -> j` transfer.
    pub values: Vec<Vec<f64>>,
}

impl TransferabilityMatrix {
    pub fn csv(&self) -> String {
        let mut out = String::from("task");
        for name in &self.task_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&self.task_names[i]);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Splits a dataset into a training front and dev tail (deterministic
/// shuffle by `seed`).
fn split_dataset(ds: &TaskDataset, dev_fraction: f64, seed: u64) -> Result<(TaskDataset, TaskDataset)> {
    let shuffled = sample_target_batch(ds, ds.len(), seed)?;
    let dev_len = ((ds.len() as f64 * dev_fraction) as usize).clamp(1, ds.len() - 1);
    let train_len = ds.len() - dev_len;
    Ok((
        TaskDataset::new(format!("{}_train", ds.name), shuffled[..train_len].to_vec())?,
        TaskDataset::new(format!("{}_dev", ds.name), shuffled[train_len..].to_vec())?,
    ))
}

/// Pairwise transfer benefits between the config's source tasks, averaged
/// over the config's seeds. Each task is split 80/20 into train/dev; cell
/// `(i, j)` pretrains on `i`'s training split, fine-tunes on `j`'s, and
/// subtracts the accuracy of fine-tuning on `j` alone.
pub fn transferability_matrix(cfg: &RunConfig) -> Result<TransferabilityMatrix> {
    cfg.validate()?;
    let data = build_data(&cfg.data)?;
    let m = data.sources.len();
    let encoder = EncoderConfig {
        input_dim: cfg.data.feature_dim(),
        hidden_dim: cfg.model.hidden_dim,
        layers: cfg.model.layers,
    };
    let model = ScoringModel::new(encoder)?;

    let mut values = vec![vec![0.0; m]; m];
    for &seed in &cfg.seeds {
        let mut splits = Vec::with_capacity(m);
        for (i, s) in data.sources.iter().enumerate() {
            splits.push(split_dataset(s, 0.2, rng::derive_seed(seed, &format!("split/{i}")))?);
        }
        let theta0 = model.init_params(rng::derive_seed(seed, "theta"));
        // both arms of a comparison fine-tune on task j with the same
        // batch sequence, so the only difference is the starting point
        let finetune = |start: &ParameterVector, task: usize| -> Result<f64> {
            let tuned = transfer_finetune(
                &model,
                start,
                &splits[task].0,
                cfg.meta.transfer_batches,
                cfg.meta.transfer_batch_size,
                cfg.meta.transfer_lr,
                rng::derive_seed(seed, &format!("ft/{task}")),
            )?;
            model.accuracy(&tuned, &splits[task].1.instances)
        };
        // direct fine-tuning accuracy of every task
        let mut direct = Vec::with_capacity(m);
        for j in 0..m {
            direct.push(finetune(&theta0, j)?);
        }
        for i in 0..m {
            let pretrained = transfer_finetune(
                &model,
                &theta0,
                &splits[i].0,
                cfg.meta.transfer_batches,
                cfg.meta.transfer_batch_size,
                cfg.meta.transfer_lr,
                rng::derive_seed(seed, &format!("pretrain/{i}")),
            )?;
            for j in 0..m {
                if i == j {
                    continue;
                }
                let transferred = finetune(&pretrained, j)?;
                values[i][j] += (transferred - direct[j]) / cfg.seeds.len() as f64;
            }
        }
    }
    Ok(TransferabilityMatrix {
        task_names: data.sources.iter().map(|s| s.name.clone()).collect(),
        values,
    })
}
