//! Low-level numeric kernels shared by the tape and the plain (no-gradient)
//! forward paths. Both paths must call these same routines so their values
//! stay bitwise identical.

/// `out = W x` with `W` stored row-major as `rows x cols`.
pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

/// `dx += W^T dy`, the input-side backward of [`matvec`].
pub(crate) fn matvec_t_acc(w: &[f64], dy: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let d = dy[r];
        for c in 0..cols {
            dx[c] += d * row[c];
        }
    }
}

/// `dw += dy x^T`, the weight-side backward of [`matvec`].
pub(crate) fn outer_acc(dy: &[f64], x: &[f64], cols: usize, dw: &mut [f64]) {
    for (r, d) in dy.iter().enumerate() {
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += d * x[c];
        }
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax(xs: &[f64], out: &mut [f64]) {
    let m = max_of(xs);
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(xs) {
        let e = (x - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Negative log softmax probability of entry `gold`, plus the softmax itself
/// (the backward pass needs it).
pub(crate) fn softmax_nll(scores: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; scores.len()];
    let m = max_of(scores);
    let mut z = 0.0;
    for (p, s) in probs.iter_mut().zip(scores) {
        let e = (s - m).exp();
        *p = e;
        z += e;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    let loss = z.ln() - (scores[gold] - m);
    (loss, probs)
}

pub(crate) fn max_of(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    m
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean, summed in slice order.
pub(crate) fn mean(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        acc += x;
    }
    acc / xs.len() as f64
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn l2_norm(xs: &[f64]) -> f64 {
    dot(xs, xs).sqrt()
}
