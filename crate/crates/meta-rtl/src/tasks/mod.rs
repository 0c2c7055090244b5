//! Task datasets and everything that samples from them: synthetic task
//! families, episode/batch sampling, size-temperature distributions,
//! low-resource subsampling, and JSONL ingestion.

pub mod jsonl;
pub mod synthetic;

pub use jsonl::{hash_features, load_jsonl};
pub use synthetic::{make_synthetic_family, SyntheticFamilySpec};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ChoiceInstance;
use crate::rng;

/// A named collection of multiple-choice instances.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub name: String,
    pub instances: Vec<ChoiceInstance>,
}

impl TaskDataset {
    pub fn new(name: impl Into<String>, instances: Vec<ChoiceInstance>) -> Result<TaskDataset> {
        let name = name.into();
        if instances.is_empty() {
            return Err(Error::EmptyBatch(format!("dataset {name} has no instances")));
        }
        Ok(TaskDataset { name, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Support/query split drawn from one task. The two sides never overlap.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<ChoiceInstance>,
    pub query: Vec<ChoiceInstance>,
}

/// First `k` entries of a seeded partial Fisher-Yates pass over `0..n`:
/// a uniform draw of `k` distinct indices, in shuffled order.
fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Draws `support_size + query_size` distinct instances uniformly without
/// replacement and splits them into an [`Episode`].
pub fn sample_episode(
    dataset: &TaskDataset,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Episode> {
    if support_size == 0 {
        return Err(Error::EmptyBatch("episode support size 0".into()));
    }
    let want = support_size + query_size;
    if want > dataset.len() {
        return Err(Error::EmptyBatch(format!(
            "episode wants {want} instances, dataset {} has {}",
            dataset.name,
            dataset.len()
        )));
    }
    let mut r = rng::stream(seed, "episode");
    let idx = sample_indices(dataset.len(), want, &mut r);
    let support = idx[..support_size]
        .iter()
        .map(|i| dataset.instances[*i].clone())
        .collect();
    let query = idx[support_size..]
        .iter()
        .map(|i| dataset.instances[*i].clone())
        .collect();
    Ok(Episode { support, query })
}

/// Uniform without-replacement batch from the target task. Requesting the
/// whole dataset returns every instance in shuffled order.
pub fn sample_target_batch(
    dataset: &TaskDataset,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ChoiceInstance>> {
    if batch_size == 0 {
        return Err(Error::EmptyBatch("target batch size 0".into()));
    }
    if batch_size > dataset.len() {
        return Err(Error::EmptyBatch(format!(
            "batch of {batch_size} from dataset {} of {}",
            dataset.name,
            dataset.len()
        )));
    }
    let mut r = rng::stream(seed, "target_batch");
    let idx = sample_indices(dataset.len(), batch_size, &mut r);
    Ok(idx.iter().map(|i| dataset.instances[*i].clone()).collect())
}

/// Size-temperature sampling distribution: `p_i ∝ d_i^(1/omega)`.
///
/// `omega = 1` reproduces the raw size proportions; larger `omega` flattens
/// the distribution toward uniform. Computed in log space so huge sizes and
/// large `omega` stay stable.
pub fn temperature_probs(sizes: &[f64], omega: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::EmptyBatch("temperature_probs over no sizes".into()));
    }
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::ConfigError(format!("omega must be positive, got {omega}")));
    }
    if sizes.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::ConfigError("dataset sizes must be positive".into()));
    }
    let logs: Vec<f64> = sizes.iter().map(|d| d.ln() / omega).collect();
    let m = logs.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let mut probs: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= z;
    }
    Ok(probs)
}

/// Keeps `floor(fraction * n)` instances (at least one), drawn uniformly
/// without replacement; the survivors keep their original dataset order.
pub fn subsample_fraction(
    dataset: &TaskDataset,
    fraction: f64,
    seed: u64,
) -> Result<TaskDataset> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::ConfigError(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let keep = ((fraction * dataset.len() as f64).floor() as usize).max(1);
    let mut r = rng::stream(seed, "subsample");
    let mut idx = sample_indices(dataset.len(), keep, &mut r);
    idx.sort_unstable();
    let instances = idx.iter().map(|i| dataset.instances[*i].clone()).collect();
    TaskDataset::new(dataset.name.clone(), instances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize) -> TaskDataset {
        let instances = (0..n)
            .map(|i| {
                ChoiceInstance::new(
                    vec![vec![i as f64], vec![-(i as f64) - 1.0]],
                    0,
                )
                .unwrap()
            })
            .collect();
        TaskDataset::new("toy", instances).unwrap()
    }

    #[test]
    fn episode_partitions_disjointly() {
        let ds = toy_dataset(16);
        let ep = sample_episode(&ds, 8, 8, 3).unwrap();
        assert_eq!(ep.support.len(), 8);
        assert_eq!(ep.query.len(), 8);
        let mut seen: Vec<f64> = ep
            .support
            .iter()
            .chain(&ep.query)
            .map(|i| i.features[0][0])
            .collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 16, "support and query overlap");
    }

    #[test]
    fn episode_sampling_is_deterministic() {
        let ds = toy_dataset(20);
        let a = sample_episode(&ds, 4, 4, 77).unwrap();
        let b = sample_episode(&ds, 4, 4, 77).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.query, b.query);
        let c = sample_episode(&ds, 4, 4, 78).unwrap();
        assert_ne!(a.support, c.support);
    }

    #[test]
    fn episode_rejects_oversized_requests() {
        let ds = toy_dataset(5);
        assert!(matches!(
            sample_episode(&ds, 4, 4, 0),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn single_instance_draws_are_uniform() {
        let ds = toy_dataset(100);
        let mut counts = vec![0usize; 100];
        for seed in 0..10_000u64 {
            let ep = sample_episode(&ds, 1, 0, seed).unwrap();
            counts[ep.support[0].features[0][0] as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.01).abs() < 0.005, "frequency {f}");
        }
    }

    #[test]
    fn full_batch_is_a_shuffle() {
        let ds = toy_dataset(12);
        let batch = sample_target_batch(&ds, 12, 5).unwrap();
        let mut ids: Vec<f64> = batch.iter().map(|i| i.features[0][0]).collect();
        ids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(ids, expect);
        let in_order = sample_target_batch(&ds, 12, 5).unwrap();
        assert!(batch.iter().zip(&in_order).all(|(a, b)| a == b));
    }

    #[test]
    fn zero_batch_is_an_error() {
        let ds = toy_dataset(4);
        assert!(matches!(
            sample_target_batch(&ds, 0, 0),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn different_seeds_usually_differ() {
        let ds = toy_dataset(50);
        let base = sample_target_batch(&ds, 10, 0).unwrap();
        let mut distinct = 0;
        for seed in 1..=100u64 {
            if sample_target_batch(&ds, 10, seed).unwrap() != base {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct}/100 differed");
    }

    #[test]
    fn temperature_matches_published_proportions() {
        // Training-set sizes of four of the benchmark datasets; at omega = 1
        // the distribution is just the normalized sizes.
        let sizes = [9741.0, 40398.0, 10176.0, 3510.0];
        let p = temperature_probs(&sizes, 1.0).unwrap();
        let expect = [0.1526, 0.6330, 0.1594, 0.0550];
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 5e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn huge_omega_flattens_to_uniform() {
        let sizes = [9741.0, 40398.0, 10176.0, 3510.0];
        let p = temperature_probs(&sizes, 1e6).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn equal_sizes_are_uniform_for_any_omega() {
        for omega in [0.5, 1.0, 2.0, 5.0] {
            let p = temperature_probs(&[123.0; 5], omega).unwrap();
            for v in &p {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_rejects_bad_inputs() {
        assert!(temperature_probs(&[1.0, 2.0], 0.0).is_err());
        assert!(temperature_probs(&[1.0, -2.0], 1.0).is_err());
        assert!(temperature_probs(&[], 1.0).is_err());
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let ds = toy_dataset(9);
        let out = subsample_fraction(&ds, 1.0, 4).unwrap();
        assert_eq!(out.instances, ds.instances);
    }

    #[test]
    fn subsample_floors_the_count() {
        let ds = toy_dataset(3510);
        let out = subsample_fraction(&ds, 0.01, 4).unwrap();
        assert_eq!(out.len(), 35);
        // survivors keep dataset order
        let ids: Vec<f64> = out.instances.iter().map(|i| i.features[0][0]).collect();
        let mut sorted = ids.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(ids, sorted);
    }

    #[test]
    fn subsample_seeds_pick_different_subsets() {
        let ds = toy_dataset(100);
        let a = subsample_fraction(&ds, 0.2, 1).unwrap();
        let b = subsample_fraction(&ds, 0.2, 2).unwrap();
        assert_ne!(a.instances, b.instances);
    }
}
