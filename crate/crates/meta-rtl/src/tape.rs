//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Values on the tape are flat `f64` buffers (scalars are length-1 buffers,
//! matrices are row-major with shape carried by the op that consumes them).
//! Each builder method records one [`Node`] and returns a [`Val`] handle;
//! [`Tape::backward`] walks the record in reverse, accumulating adjoints.
//!
//! The primitive set is deliberately small: it is exactly what the scoring
//! model, the recurrent policy network, and the trajectory log-probability
//! objective need. Everything is plain `f64` arithmetic in a fixed order, so
//! repeated evaluation of the same graph is bit-identical.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParameterVector;

/// Handle to a buffer on the tape. Nodes are append-only, so a `Val` created
/// later always has a larger index than its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Node {
    /// Input buffer (parameters or data). No parents.
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    Neg(Val),
    /// `c * x` for a compile-time constant `c`.
    Scale(Val, f64),
    /// `x + c` elementwise for a constant `c`.
    AddConst(Val),
    /// `W x`; `w` is a row-major `rows x cols` buffer.
    MatVec {
        w: Val,
        x: Val,
        rows: usize,
        cols: usize,
    },
    Dot(Val, Val),
    /// Scalar buffer times vector buffer.
    MulScalar {
        s: Val,
        v: Val,
    },
    Sum(Val),
    Mean(Val),
    Tanh(Val),
    Sigmoid(Val),
    Ln(Val),
    Softmax(Val),
    /// Fused `-log softmax(scores)[gold]`; caches the softmax for backward.
    SoftmaxNll {
        scores: Val,
        gold: usize,
        probs: Vec<f64>,
    },
    Concat(Vec<Val>),
    Slice {
        src: Val,
        offset: usize,
    },
}

/// Wengert tape: forward values plus enough structure to replay in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, node: Node, value: Vec<f64>) -> Val {
        self.nodes.push(node);
        self.vals.push(value);
        Val(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input buffer. Gradients accumulate into leaves like any
    /// other node; callers read back the ones they care about.
    pub fn leaf(&mut self, values: &[f64]) -> Val {
        self.push(Node::Leaf, values.to_vec())
    }

    pub fn scalar(&mut self, value: f64) -> Val {
        self.push(Node::Leaf, vec![value])
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.vals[v.0]
    }

    pub fn scalar_value(&self, v: Val) -> f64 {
        self.vals[v.0][0]
    }

    fn check_same_len(&self, a: Val, b: Val, op: &str) -> Result<usize> {
        let (la, lb) = (self.vals[a.0].len(), self.vals[b.0].len());
        if la != lb {
            return Err(Error::ShapeMismatch(format!("{op}: {la} vs {lb}")));
        }
        Ok(la)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_len(a, b, "add")?;
        let v: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Node::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_len(a, b, "sub")?;
        let v: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Node::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_len(a, b, "mul")?;
        let v: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Node::Mul(a, b), v))
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_len(a, b, "div")?;
        let v: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(Node::Div(a, b), v))
    }

    pub fn neg(&mut self, a: Val) -> Val {
        let v: Vec<f64> = self.vals[a.0].iter().map(|x| -x).collect();
        self.push(Node::Neg(a), v)
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let v: Vec<f64> = self.vals[a.0].iter().map(|x| c * x).collect();
        self.push(Node::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: Val, c: f64) -> Val {
        let v: Vec<f64> = self.vals[a.0].iter().map(|x| x + c).collect();
        self.push(Node::AddConst(a), v)
    }

    pub fn matvec(&mut self, w: Val, x: Val, rows: usize, cols: usize) -> Result<Val> {
        if self.vals[w.0].len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: weight buffer has {} entries, expected {rows}x{cols}",
                self.vals[w.0].len()
            )));
        }
        if self.vals[x.0].len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: input has {} entries, expected {cols}",
                self.vals[x.0].len()
            )));
        }
        let mut out = vec![0.0; rows];
        kernels::matvec(&self.vals[w.0], &self.vals[x.0], rows, cols, &mut out);
        Ok(self.push(Node::MatVec { w, x, rows, cols }, out))
    }

    pub fn dot(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_len(a, b, "dot")?;
        let v = kernels::dot(&self.vals[a.0], &self.vals[b.0]);
        Ok(self.push(Node::Dot(a, b), vec![v]))
    }

    pub fn mul_scalar(&mut self, s: Val, v: Val) -> Result<Val> {
        if self.vals[s.0].len() != 1 {
            return Err(Error::ShapeMismatch("mul_scalar: s must be scalar".into()));
        }
        let c = self.vals[s.0][0];
        let out: Vec<f64> = self.vals[v.0].iter().map(|x| c * x).collect();
        Ok(self.push(Node::MulScalar { s, v }, out))
    }

    pub fn sum(&mut self, a: Val) -> Val {
        let mut acc = 0.0;
        for x in &self.vals[a.0] {
            acc += x;
        }
        self.push(Node::Sum(a), vec![acc])
    }

    pub fn mean(&mut self, a: Val) -> Result<Val> {
        if self.vals[a.0].is_empty() {
            return Err(Error::EmptyBatch("mean of empty buffer".into()));
        }
        let m = kernels::mean(&self.vals[a.0]);
        Ok(self.push(Node::Mean(a), vec![m]))
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let v: Vec<f64> = self.vals[a.0].iter().map(|x| x.tanh()).collect();
        self.push(Node::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let v: Vec<f64> = self.vals[a.0]
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Node::Sigmoid(a), v)
    }

    pub fn ln(&mut self, a: Val) -> Val {
        let v: Vec<f64> = self.vals[a.0].iter().map(|x| x.ln()).collect();
        self.push(Node::Ln(a), v)
    }

    pub fn softmax(&mut self, a: Val) -> Val {
        let mut out = vec![0.0; self.vals[a.0].len()];
        kernels::softmax(&self.vals[a.0], &mut out);
        self.push(Node::Softmax(a), out)
    }

    /// `-log softmax(scores)[gold]` as one fused scalar op.
    pub fn softmax_nll(&mut self, scores: Val, gold: usize) -> Result<Val> {
        let n = self.vals[scores.0].len();
        if gold >= n {
            return Err(Error::ShapeMismatch(format!(
                "softmax_nll: gold index {gold} out of range for {n} scores"
            )));
        }
        let (loss, probs) = kernels::softmax_nll(&self.vals[scores.0], gold);
        Ok(self.push(Node::SoftmaxNll { scores, gold, probs }, vec![loss]))
    }

    pub fn concat(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::EmptyBatch("concat of no parts".into()));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.vals[p.0]);
        }
        Ok(self.push(Node::Concat(parts.to_vec()), out))
    }

    pub fn slice(&mut self, src: Val, offset: usize, len: usize) -> Result<Val> {
        let n = self.vals[src.0].len();
        if offset + len > n {
            return Err(Error::ShapeMismatch(format!(
                "slice [{offset}, {}) out of range for buffer of {n}",
                offset + len
            )));
        }
        let out = self.vals[src.0][offset..offset + len].to_vec();
        Ok(self.push(Node::Slice { src, offset }, out))
    }

    /// Reverse sweep from a scalar `loss`. Errors if the loss is not scalar
    /// or not finite. Afterwards [`Tape::grad`] reads adjoints; nodes the
    /// loss does not depend on report zeros.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        let lv = &self.vals[loss.0];
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward from non-scalar of length {}",
                lv.len()
            )));
        }
        if !lv[0].is_finite() {
            return Err(Error::NonFiniteLoss(lv[0]));
        }

        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            // Output ids are strictly greater than their inputs, so splitting
            // at `id` gives disjoint access to the output adjoint and the
            // input adjoints.
            let (head, tail) = self.grads.split_at_mut(id);
            let dz = tail[0].as_ref().expect("adjoint present").clone();
            let vals = &self.vals;
            let mut acc = |v: Val, f: &mut dyn FnMut(&mut [f64])| {
                let slot =
                    head[v.0].get_or_insert_with(|| vec![0.0; vals[v.0].len()]);
                f(slot);
            };
            match &self.nodes[id] {
                Node::Leaf => {}
                Node::Add(a, b) => {
                    acc(*a, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dz) {
                            *gi += d;
                        }
                    });
                    acc(*b, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dz) {
                            *gi += d;
                        }
                    });
                }
                Node::Sub(a, b) => {
                    acc(*a, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dz) {
                            *gi += d;
                        }
                    });
                    acc(*b, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dz) {
                            *gi -= d;
                        }
                    });
                }
                Node::Mul(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dz[i] * bv[i];
                        }
                    });
                    acc(*b, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dz[i] * av[i];
                        }
                    });
                }
                Node::Div(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dz[i] / bv[i];
                        }
                    });
                    acc(*b, &mut |g| {
                        for i in 0..g.len() {
                            g[i] -= dz[i] * av[i] / (bv[i] * bv[i]);
                        }
                    });
                }
                Node::Neg(a) => {
                    acc(*a, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dz) {
                            *gi -= d;
                        }
                    });
                }
                Node::Scale(a, c) => {
                    let c = *c;
                    acc(*a, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dz) {
                            *gi += c * d;
                        }
                    });
                }
                Node::AddConst(a) => {
                    acc(*a, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dz) {
                            *gi += d;
                        }
                    });
                }
                Node::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let wv = &vals[w.0];
                    let xv = &vals[x.0];
                    acc(*w, &mut |g| kernels::outer_acc(&dz, xv, cols, g));
                    acc(*x, &mut |g| kernels::matvec_t_acc(wv, &dz, rows, cols, g));
                }
                Node::Dot(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let d = dz[0];
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += d * bv[i];
                        }
                    });
                    acc(*b, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += d * av[i];
                        }
                    });
                }
                Node::MulScalar { s, v } => {
                    let sv = vals[s.0][0];
                    let vv = &vals[v.0];
                    acc(*s, &mut |g| {
                        let mut t = 0.0;
                        for i in 0..vv.len() {
                            t += dz[i] * vv[i];
                        }
                        g[0] += t;
                    });
                    acc(*v, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += sv * dz[i];
                        }
                    });
                }
                Node::Sum(a) => {
                    let d = dz[0];
                    acc(*a, &mut |g| {
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    });
                }
                Node::Mean(a) => {
                    let n = vals[a.0].len() as f64;
                    let d = dz[0] / n;
                    acc(*a, &mut |g| {
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    });
                }
                Node::Tanh(a) => {
                    let yv = &vals[id];
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dz[i] * (1.0 - yv[i] * yv[i]);
                        }
                    });
                }
                Node::Sigmoid(a) => {
                    let yv = &vals[id];
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dz[i] * yv[i] * (1.0 - yv[i]);
                        }
                    });
                }
                Node::Ln(a) => {
                    let xv = &vals[a.0];
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dz[i] / xv[i];
                        }
                    });
                }
                Node::Softmax(a) => {
                    // dx = y .* (dz - (dz . y))
                    let yv = &vals[id];
                    let mut inner = 0.0;
                    for i in 0..yv.len() {
                        inner += dz[i] * yv[i];
                    }
                    acc(*a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += yv[i] * (dz[i] - inner);
                        }
                    });
                }
                Node::SoftmaxNll { scores, gold, probs } => {
                    let d = dz[0];
                    let gold = *gold;
                    acc(*scores, &mut |g| {
                        for i in 0..g.len() {
                            let onehot = if i == gold { 1.0 } else { 0.0 };
                            g[i] += d * (probs[i] - onehot);
                        }
                    });
                }
                Node::Concat(parts) => {
                    let mut off = 0;
                    for p in parts.clone() {
                        let len = vals[p.0].len();
                        let piece = &dz[off..off + len];
                        acc(p, &mut |g| {
                            for i in 0..len {
                                g[i] += piece[i];
                            }
                        });
                        off += len;
                    }
                }
                Node::Slice { src, offset } => {
                    let offset = *offset;
                    acc(*src, &mut |g| {
                        for (i, d) in dz.iter().enumerate() {
                            g[offset + i] += d;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Adjoint of `v` after [`Tape::backward`]; zeros if the loss never
    /// touched it.
    pub fn grad(&self, v: Val) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.vals[v.0].len()],
        }
    }
}

/// A differentiable scalar objective built on a tape.
///
/// Implemented for closures, so ad hoc objectives can be written inline:
///
/// ```
/// use meta_rtl::tape::{Tape, Val};
/// use meta_rtl::error::Result;
///
/// let square = |tape: &mut Tape, p: Val| -> Result<Val> {
///     let y = tape.mul(p, p)?;
///     Ok(tape.sum(y))
/// };
/// # let _ = square;
/// ```
pub trait Objective {
    fn loss(&self, tape: &mut Tape, params: Val) -> Result<Val>;
}

impl<F> Objective for F
where
    F: Fn(&mut Tape, Val) -> Result<Val>,
{
    fn loss(&self, tape: &mut Tape, params: Val) -> Result<Val> {
        self(tape, params)
    }
}

/// Runs the objective forward only and returns the scalar loss.
pub fn evaluate_loss<O: Objective + ?Sized>(params: &ParameterVector, obj: &O) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(params.values());
    let loss = obj.loss(&mut tape, p)?;
    let lv = tape.value(loss);
    if lv.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "objective returned buffer of length {}",
            lv.len()
        )));
    }
    if !lv[0].is_finite() {
        return Err(Error::NonFiniteLoss(lv[0]));
    }
    Ok(lv[0])
}

/// Evaluates the objective and its gradient with respect to every parameter
/// coordinate. Parameters the loss never touches get exactly zero gradient.
pub fn evaluate_with_gradients<O: Objective + ?Sized>(
    params: &ParameterVector,
    obj: &O,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.leaf(params.values());
    let loss = obj.loss(&mut tape, p)?;
    let lv = tape.value(loss);
    if lv.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "objective returned buffer of length {}",
            lv.len()
        )));
    }
    let loss_value = lv[0];
    tape.backward(loss)?;
    Ok((loss_value, tape.grad(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamLayout;

    fn pv(values: Vec<f64>) -> ParameterVector {
        let layout = ParamLayout::build(&[("w", values.len())]).unwrap();
        ParameterVector::from_values(layout, values).unwrap()
    }

    #[test]
    fn square_loss_at_three() {
        let params = pv(vec![3.0]);
        let (loss, grad) = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            let y = t.mul(p, p)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grad, vec![6.0]);
    }

    #[test]
    fn tanh_at_zero_has_unit_slope() {
        let params = pv(vec![0.0]);
        let (loss, grad) = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            let y = t.tanh(p);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![1.0]);
    }

    #[test]
    fn untouched_parameters_get_exact_zeros() {
        let params = pv(vec![1.0, 2.0, 3.0, 4.0]);
        let (_, grad) = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            let first = t.slice(p, 0, 1)?;
            let y = t.mul(first, first)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(grad, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let params = pv(vec![0.3, -0.8, 1.7]);
        let obj = |t: &mut Tape, p: Val| -> Result<Val> {
            let s = t.tanh(p);
            let q = t.mul(s, p)?;
            let m = t.mean(q)?;
            let sm = t.softmax(p);
            let pick = t.slice(sm, 1, 1)?;
            let l = t.ln(pick);
            let nl = t.neg(l);
            t.add(m, nl)
        };
        let (l1, g1) = evaluate_with_gradients(&params, &obj).unwrap();
        let (l2, g2) = evaluate_with_gradients(&params, &obj).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let params = pv(vec![0.0]);
        let err = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            let l = t.ln(p); // ln(0) = -inf
            Ok(t.sum(l))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(v) if v.is_infinite()));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let params = pv(vec![1.0, 2.0, 3.0]);
        let err = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            let a = t.slice(p, 0, 1)?;
            let b = t.slice(p, 1, 2)?;
            t.add(a, b)
        })
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn matvec_gradients_match_hand_computation() {
        // f(W, x) = sum(W x) with W = [[1,2],[3,4]], x = [5,6]
        // dW = [x; x], dx = column sums of W = [4, 6]
        let params = pv(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (loss, grad) = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            let w = t.slice(p, 0, 4)?;
            let x = t.slice(p, 4, 2)?;
            let y = t.matvec(w, x, 2, 2)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(loss, 17.0 + 39.0);
        assert_eq!(grad, vec![5.0, 6.0, 5.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_nll_gradient_is_probs_minus_onehot() {
        let params = pv(vec![1.0, 2.0, 0.5]);
        let (_, grad) = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            t.softmax_nll(p, 1)
        })
        .unwrap();
        let (_, probs) = kernels::softmax_nll(&[1.0, 2.0, 0.5], 1);
        assert!((grad[0] - probs[0]).abs() < 1e-15);
        assert!((grad[1] - (probs[1] - 1.0)).abs() < 1e-15);
        assert!((grad[2] - probs[2]).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_route_adjoints() {
        let params = pv(vec![1.0, 2.0]);
        // loss = 2*p0 + 3*p1 via concat of scaled slices
        let (loss, grad) = evaluate_with_gradients(&params, &|t: &mut Tape, p: Val| {
            let a = t.slice(p, 0, 1)?;
            let b = t.slice(p, 1, 1)?;
            let a2 = t.scale(a, 2.0);
            let b3 = t.scale(b, 3.0);
            let c = t.concat(&[a2, b3])?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert_eq!(loss, 8.0);
        assert_eq!(grad, vec![2.0, 3.0]);
    }
}
