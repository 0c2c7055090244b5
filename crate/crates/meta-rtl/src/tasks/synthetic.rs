//! Synthetic multiple-choice task families with a controllable degree of
//! relatedness between tasks.
//!
//! A family is defined by a latent unit-norm concept vector. Candidate
//! answers are i.i.d. standard normal feature vectors, and the gold answer
//! is the candidate with the largest dot product against the concept. The
//! concept itself is constructed at a chosen correlation `rho_rel` to a
//! reference concept by a Gram-Schmidt mix,
//!
//! ```text
//! concept = rho_rel * reference + sqrt(1 - rho_rel^2) * orthogonal
//! ```
//!
//! so `rho_rel = 1` clones the reference task and `rho_rel = 0` produces an
//! unrelated one. Optional label noise reassigns a fraction of gold labels
//! to a random wrong candidate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::ChoiceInstance;
use crate::rng;
use crate::tasks::TaskDataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticFamilySpec {
    pub family_id: String,
    pub input_dim: usize,
    pub n_candidates: usize,
    /// Unit-norm reference concept the family correlates with.
    pub reference_concept: Vec<f64>,
    /// Correlation of this family's concept to the reference, in [-1, 1].
    pub rho_rel: f64,
    /// Probability of replacing a gold label with a random wrong candidate.
    pub label_noise: f64,
    pub instances: usize,
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::ConfigError("input_dim must be at least 1".into()));
        }
        if self.n_candidates < 2 {
            return Err(Error::ConfigError("need at least 2 candidates".into()));
        }
        if self.reference_concept.len() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "reference concept has dim {}, family expects {}",
                self.reference_concept.len(),
                self.input_dim
            )));
        }
        let norm = kernels::l2_norm(&self.reference_concept);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::ConfigError(format!(
                "reference concept norm {norm}, expected unit"
            )));
        }
        if !(-1.0..=1.0).contains(&self.rho_rel) {
            return Err(Error::ConfigError(format!(
                "rho_rel {} outside [-1, 1]",
                self.rho_rel
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::ConfigError(format!(
                "label_noise {} outside [0, 0.5)",
                self.label_noise
            )));
        }
        if self.instances == 0 {
            return Err(Error::EmptyBatch("family with zero instances".into()));
        }
        Ok(())
    }
}

/// A random unit vector (normalized standard normal draw).
pub fn random_unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = kernels::l2_norm(&v);
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Builds the family concept at the requested correlation to the reference.
fn build_concept(spec: &SyntheticFamilySpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rho = spec.rho_rel;
    if rho == 1.0 {
        return spec.reference_concept.clone();
    }
    if rho == -1.0 {
        return spec.reference_concept.iter().map(|x| -x).collect();
    }
    // Draw a direction, remove its component along the reference, normalize;
    // redraw in the (measure-zero) case of near-collinearity.
    let orth = loop {
        let g: Vec<f64> = (0..spec.input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let proj = kernels::dot(&g, &spec.reference_concept);
        let mut o: Vec<f64> = g
            .iter()
            .zip(&spec.reference_concept)
            .map(|(gi, ri)| gi - proj * ri)
            .collect();
        let norm = kernels::l2_norm(&o);
        if norm > 1e-9 {
            for x in o.iter_mut() {
                *x /= norm;
            }
            break o;
        }
    };
    let w = (1.0 - rho * rho).sqrt();
    spec.reference_concept
        .iter()
        .zip(&orth)
        .map(|(r, o)| rho * r + w * o)
        .collect()
}

/// Generates the family's dataset; returns it together with the concept that
/// produced the labels so tests can verify against the generative rule.
pub fn make_synthetic_family(
    spec: &SyntheticFamilySpec,
    seed: u64,
) -> Result<(TaskDataset, Vec<f64>)> {
    spec.validate()?;
    let mut r = rng::stream(seed, &format!("family/{}", spec.family_id));
    let concept = build_concept(spec, &mut r);

    let mut instances = Vec::with_capacity(spec.instances);
    for _ in 0..spec.instances {
        let features: Vec<Vec<f64>> = (0..spec.n_candidates)
            .map(|_| {
                (0..spec.input_dim)
                    .map(|_| r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let dots: Vec<f64> = features.iter().map(|f| kernels::dot(f, &concept)).collect();
        let gold = kernels::argmax(&dots);
        let label = if spec.label_noise > 0.0 && r.gen::<f64>() < spec.label_noise {
            // uniform over the wrong candidates
            let w = r.gen_range(0..spec.n_candidates - 1);
            if w >= gold {
                w + 1
            } else {
                w
            }
        } else {
            gold
        };
        instances.push(ChoiceInstance::new(features, label)?);
    }
    let dataset = TaskDataset::new(spec.family_id.clone(), instances)?;
    Ok((dataset, concept))
}
