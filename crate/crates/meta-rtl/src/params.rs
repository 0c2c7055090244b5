//! Flat parameter vectors with named segment views.
//!
//! Every model in this crate stores its weights in a single flat `Vec<f64>`.
//! A [`ParamLayout`] names contiguous segments of that vector ("encoder.w0",
//! "head.w1", ...) so model code can slice out matrices without ever owning
//! them separately. Meta-updates then become plain arithmetic on the flat
//! vector, which keeps the interpolation rules trivial to state and test.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A named contiguous range of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Immutable description of how a flat vector is carved into segments.
///
/// Segments are laid out back to back: they partition `[0, total_len)` with
/// no gaps and no overlap. Layouts are shared via `Arc` so cloning a
/// [`ParameterVector`] never copies the names.
#[derive(Debug, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    /// Builds a layout from `(name, len)` pairs, assigning sequential offsets.
    pub fn build(spec: &[(&str, usize)]) -> Result<Arc<ParamLayout>> {
        let mut segments = Vec::with_capacity(spec.len());
        let mut offset = 0usize;
        for (name, len) in spec {
            if *len == 0 {
                return Err(Error::ConfigError(format!("segment {name} has zero length")));
            }
            if segments.iter().any(|s: &Segment| s.name == *name) {
                return Err(Error::ConfigError(format!("duplicate segment name {name}")));
            }
            segments.push(Segment {
                name: (*name).to_owned(),
                offset,
                len: *len,
            });
            offset += len;
        }
        Ok(Arc::new(ParamLayout {
            segments,
            total: offset,
        }))
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::ConfigError(format!("no segment named {name}")))
    }

    /// Maps a flat index back to `(segment name, index within segment)`.
    fn locate(&self, index: usize) -> (&str, usize) {
        for s in &self.segments {
            if index >= s.offset && index < s.offset + s.len {
                return (&s.name, index - s.offset);
            }
        }
        ("<out of range>", index)
    }
}

/// A flat weight vector plus the layout that names its pieces.
#[derive(Debug, Clone)]
pub struct ParameterVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> ParameterVector {
        let n = layout.total_len();
        ParameterVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<ParameterVector> {
        if values.len() != layout.total_len() {
            return Err(Error::ShapeMismatch(format!(
                "layout expects {} values, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        let pv = ParameterVector { layout, values };
        pv.validate_finite()?;
        Ok(pv)
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers. Callers that commit an update must
    /// re-validate with [`ParameterVector::validate_finite`].
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment_values(&self, name: &str) -> Result<&[f64]> {
        let s = self.layout.segment(name)?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// Errors with the segment-qualified index of the first non-finite entry.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                let (name, index) = self.layout.locate(i);
                return Err(Error::NonFiniteParam {
                    name: name.to_owned(),
                    index,
                    value: *v,
                });
            }
        }
        Ok(())
    }
}

/// Moves `theta` toward a weighted combination of branch vectors:
///
/// ```text
/// theta' = theta + beta * sum_i coeffs[i] * (branches[i] - theta)
/// ```
///
/// This single primitive backs every outer meta-update in the crate: uniform
/// coefficients `1/M` give the classic average-of-differences step, and
/// learned task weights plug in unchanged. `beta = 0` or all-zero
/// coefficients return `theta` unchanged.
pub fn blend_parameters(
    theta: &ParameterVector,
    branches: &[ParameterVector],
    coeffs: &[f64],
    beta: f64,
) -> Result<ParameterVector> {
    if branches.is_empty() {
        return Err(Error::EmptyBatch("blend_parameters: no branches".into()));
    }
    if branches.len() != coeffs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} branches but {} coefficients",
            branches.len(),
            coeffs.len()
        )));
    }
    for b in branches {
        if !theta.same_layout(b) {
            return Err(Error::ShapeMismatch(
                "branch layout differs from theta".into(),
            ));
        }
    }
    if !beta.is_finite() || coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::ConfigError(
            "blend_parameters: non-finite beta or coefficient".into(),
        ));
    }

    // Accumulate the weighted differences first, then take one step of size
    // beta; scaling once at the end keeps the arithmetic identical to the
    // "average the differences, then step" formulation.
    let base = theta.values();
    let mut acc = vec![0.0; base.len()];
    for (branch, &c) in branches.iter().zip(coeffs) {
        let bv = branch.values();
        for j in 0..acc.len() {
            acc[j] += c * (bv[j] - base[j]);
        }
    }
    let mut out = theta.clone();
    let dst = out.values_mut();
    for j in 0..dst.len() {
        dst[j] = base[j] + beta * acc[j];
    }
    out.validate_finite()?;
    Ok(out)
}
