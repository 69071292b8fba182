//! Dense small-vector math, a reverse-mode tape, and a finite-difference
//! gradient checker.
//!
//! Everything is `f64`. Plain functions validate their inputs and return
//! [`Result`]; tape operations are infallible and assume shapes were checked
//! by the caller, so non-finite values surface as a non-finite loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;
/// Probabilities are clamped to this floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-30;
const DIST_TOL: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `M x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Mᵀ g`.
    pub fn matvec_t(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += gi * m;
            }
        }
        out
    }

    /// Column `j` as a vector.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= NORM_FLOOR || !n.is_finite() {
        return Err(Error::NearZeroNorm(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if n <= NORM_FLOOR {
            return Err(Error::NearZeroNorm(n));
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if logits.is_empty() {
        return Err(Error::NotADistribution("empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotADistribution("non-finite logit".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
    Ok(softmax_raw(&scaled))
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let l = logsumexp(x);
    x.iter().map(|v| v - l).collect()
}

/// Checks non-negativity, finiteness and unit sum within 1e-6.
pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::NotADistribution("empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::NotADistribution(format!("entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::NotADistribution(format!("sums to {s}")));
    }
    Ok(())
}

pub fn cross_entropy(p: &[f64], target: usize) -> Result<f64> {
    validate_distribution(p)?;
    let pt = *p.get(target).ok_or(Error::IndexOutOfRange {
        index: target,
        len: p.len(),
    })?;
    Ok(-pt.max(PROB_FLOOR).ln())
}

pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    Ok(-p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Uniformly random direction in `n` dimensions.
pub fn random_unit<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n, 1.0);
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Random orthogonal `n × n` matrix (rows orthonormal), via modified
/// Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let mut v = gaussian_vec(rng, n, 1.0);
        for k in 0..i {
            let proj = dot(&v, m.row(k));
            for (a, b) in v.iter_mut().zip(m.row(k)) {
                *a -= proj * b;
            }
        }
        if let Ok(u) = l2_normalize(&v) {
            if norm(&v) > 1e-6 {
                m.row_mut(i).copy_from_slice(&u);
                i += 1;
            }
        }
    }
    m
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Sum(Vec<usize>),
    Scale(usize, f64),
    Tanh(usize),
    MatVec(Arc<Matrix>, usize),
    Normalize(usize),
    Dot(usize, usize),
    Concat(Vec<usize>),
    Gather(usize, Vec<usize>),
    LogSumExp(usize),
    LogSumExpAcross(Vec<usize>),
    LogSoftmax(usize),
    ReduceSum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Operation trace for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a single reverse sweep visits each node once.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero if `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Input node. Constants are leaves whose gradient is simply ignored.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), v)
    }

    /// Element-wise sum of equal-length vectors.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut v = self.value(xs[0]).to_vec();
        for x in &xs[1..] {
            for (a, b) in v.iter_mut().zip(self.value(*x)) {
                *a += b;
            }
        }
        self.push(Op::Sum(xs.iter().map(|x| x.0).collect()), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push(Op::Scale(a.0, s), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a.0), v)
    }

    /// `M x + bias`; the matrix and bias are frozen.
    pub fn matvec(&mut self, m: &Arc<Matrix>, x: Var, bias: Option<&[f64]>) -> Var {
        debug_assert_eq!(m.cols(), self.value(x).len());
        let mut v = m.matvec(self.value(x));
        if let Some(b) = bias {
            for (a, c) in v.iter_mut().zip(b) {
                *a += c;
            }
        }
        self.push(Op::MatVec(Arc::clone(m), x.0), v)
    }

    pub fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = norm(x);
        let v = x.iter().map(|e| e / n).collect();
        self.push(Op::Normalize(a.0), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = vec![dot(self.value(a), self.value(b))];
        self.push(Op::Dot(a.0, b.0), v)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().flat_map(|x| self.value(*x).to_vec()).collect();
        self.push(Op::Concat(xs.iter().map(|x| x.0).collect()), v)
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let v = idx.iter().map(|i| x[*i]).collect();
        self.push(Op::Gather(a.0, idx.to_vec()), v)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        self.gather(a, &[i])
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = vec![logsumexp(self.value(a))];
        self.push(Op::LogSumExp(a.0), v)
    }

    /// Element-wise `log Σ_j exp(x_j[i])` across equal-length vectors.
    pub fn logsumexp_across(&mut self, xs: &[Var]) -> Var {
        let n = self.value(xs[0]).len();
        let v = (0..n)
            .map(|i| {
                let col: Vec<f64> = xs.iter().map(|x| self.value(*x)[i]).collect();
                logsumexp(&col)
            })
            .collect();
        self.push(Op::LogSumExpAcross(xs.iter().map(|x| x.0).collect()), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax(self.value(a));
        self.push(Op::LogSoftmax(a.0), v)
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().sum()];
        self.push(Op::ReduceSum(a.0), v)
    }

    pub fn mean_entries(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.reduce_sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar output. Node values are not modified.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(
            self.nodes[out.0].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g, 1.0);
                accumulate(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g, 1.0);
                accumulate(grads, *b, g, -1.0);
            }
            Op::Sum(xs) => {
                for x in xs {
                    accumulate(grads, *x, g, 1.0);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g, *s),
            Op::Tanh(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::MatVec(m, x) => accumulate(grads, *x, &m.matvec_t(g), 1.0),
            Op::Normalize(a) => {
                let n = norm(&self.nodes[*a].value);
                let y = &node.value;
                let yg = dot(y, g);
                let d: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| (gi - yi * yg) / n).collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                accumulate(grads, *a, vb, g[0]);
                accumulate(grads, *b, va, g[0]);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = self.nodes[*x].value.len();
                    accumulate(grads, *x, &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::Gather(a, idx) => {
                let mut d = vec![0.0; self.nodes[*a].value.len()];
                for (k, j) in idx.iter().enumerate() {
                    d[*j] += g[k];
                }
                accumulate(grads, *a, &d, 1.0);
            }
            Op::LogSumExp(a) => {
                let p = softmax_raw(&self.nodes[*a].value);
                accumulate(grads, *a, &p, g[0]);
            }
            Op::LogSumExpAcross(xs) => {
                for x in xs {
                    let d: Vec<f64> = self.nodes[*x]
                        .value
                        .iter()
                        .zip(&node.value)
                        .zip(g)
                        .map(|((v, l), gi)| gi * (v - l).exp())
                        .collect();
                    accumulate(grads, *x, &d, 1.0);
                }
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                let d: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gi, ly)| gi - ly.exp() * total)
                    .collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::ReduceSum(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(grads, *a, &vec![g[0]; n], 1.0);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], at: usize, g: &[f64], s: f64) {
    match &mut grads[at] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += s * b;
            }
        }
        slot @ None => *slot = Some(g.iter().map(|v| s * v).collect()),
    }
}

/// Worst-case disagreement between reverse-mode and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of `loss_fn` at `params` with
/// `(f(x+ε) − f(x−ε)) / 2ε`, coordinate by coordinate.
///
/// `loss_fn` receives a fresh tape and the parameter leaf and returns the
/// scalar loss node. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(loss_fn: F, params: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidStep(eps));
    }
    let eval = |x: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let p = t.leaf(x.to_vec());
        let out = loss_fn(&mut t, p);
        let v = t.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss)
        }
    };
    let mut tape = Tape::new();
    let p = tape.leaf(params.to_vec());
    let out = loss_fn(&mut tape, p);
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let analytic = tape.backward(out).wrt(p);
    let mut numeric = Vec::with_capacity(params.len());
    let mut x = params.to_vec();
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = eval(&x)?;
        x[i] = orig - eps;
        let fm = eval(&x)?;
        x[i] = orig;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let mut max_abs_err = 0.0_f64;
    let mut max_rel_err = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let abs = (a - n).abs();
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / a.abs().max(n.abs()).max(1e-8));
    }
    Ok(GradCheckReport {
        max_abs_err,
        max_rel_err,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[1e-15, 0.0]),
            Err(Error::NearZeroNorm(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[2.0, 0.0], &[5.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        // 1/sqrt(2) to 17 significant digits.
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[1.0, 0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::NearZeroNorm(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(
            softmax_with_temperature(&[0.0; 4], 0.3).unwrap(),
            vec![0.25; 4]
        );
        let p = softmax_with_temperature(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let p = softmax_with_temperature(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
        assert!(matches!(
            softmax_with_temperature(&[1.0], 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.25; 4], 0).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let ce = cross_entropy(&[0.9, 0.1], 1).unwrap();
        assert!((ce - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - 69.077_552_789_821_37).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            cross_entropy(&[0.5, 0.6], 0),
            Err(Error::NotADistribution(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.1; 10]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_quadratic_and_constant() {
        let half_sq = |t: &mut Tape, x: Var| {
            let d = t.dot(x, x);
            t.scale(d, 0.5)
        };
        let r = gradient_check(half_sq, &[1.0, 2.0], 1e-5).unwrap();
        assert!((r.analytic[0] - 1.0).abs() < 1e-15 && (r.analytic[1] - 2.0).abs() < 1e-15);
        assert!(r.max_rel_err < 1e-6);

        let constant = |t: &mut Tape, _x: Var| t.leaf(vec![3.5]);
        let r = gradient_check(constant, &[1.0, -2.0], 1e-5).unwrap();
        assert_eq!(r.analytic, vec![0.0, 0.0]);
        assert!(r.max_abs_err < 1e-9);
    }

    #[test]
    fn gradient_check_rejects_bad_step_and_nan() {
        let f = |t: &mut Tape, x: Var| t.reduce_sum(x);
        assert!(matches!(
            gradient_check(f, &[1.0], 1e-2),
            Err(Error::InvalidStep(_))
        ));
        let nan = |t: &mut Tape, _x: Var| t.leaf(vec![f64::NAN]);
        assert!(matches!(
            gradient_check(nan, &[1.0], 1e-5),
            Err(Error::NonFiniteLoss)
        ));
    }

    #[test]
    fn unreached_leaves_get_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0]);
        let b = t.leaf(vec![3.0]);
        let out = t.reduce_sum(a);
        let g = t.backward(out);
        assert!(!g.reached(b));
        assert_eq!(g.wrt(b), vec![0.0]);
        assert_eq!(g.wrt(a), vec![1.0, 1.0]);
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let m = random_orthogonal(&mut seeded_rng(5), 7);
        for i in 0..7 {
            for j in 0..7 {
                let d = dot(m.row(i), m.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }
}
