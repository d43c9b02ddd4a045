//! Scalar and dense kernels shared by every analysis.
//!
//! Storage is binary32; dot products and reductions accumulate in binary64.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Normalization epsilon used by every layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Dense row-major matrix of finite `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape ({rows}, {cols}) must be positive"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor shape must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut t = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                t.data[r * cols + c] = f(r, c);
            }
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to raw storage. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x` for a `cols`-length vector.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x) as f32).collect())
    }

    /// `self · other` (rows×k times k×cols).
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        let mut acc = vec![0.0f64; other.cols];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a) in self.row(r).iter().enumerate() {
                let a = a as f64;
                for (slot, &b) in acc.iter_mut().zip(other.row(k)) {
                    *slot += a * b as f64;
                }
            }
            for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        Tensor2::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense finite `f32` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor1(Vec<f32>);

impl Tensor1 {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::ShapeMismatch("empty vector".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {pos}")));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        Self(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        Self(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

impl std::ops::Deref for Tensor1 {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    GeluExact,
    GeluTanh,
    Silu,
    Sigmoid,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::GeluExact,
        ActivationKind::GeluTanh,
        ActivationKind::Silu,
        ActivationKind::Sigmoid,
    ];

    pub fn apply(self, x: f64) -> f64 {
        apply_activation(self, x)
    }

    /// First derivative, used by backpropagation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::GeluExact => {
                let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            ActivationKind::GeluTanh => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let inner = c * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = c * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-log σ(x)`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}

pub fn apply_activation(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::GeluExact => 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)),
        ActivationKind::GeluTanh => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        ActivationKind::Silu => x * sigmoid(x),
        ActivationKind::Sigmoid => sigmoid(x),
    }
}

/// Dot product with binary64 accumulation over mixed precisions.
pub fn dot<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.into() * y.into())
        .sum()
}

pub fn norm<A: Copy + Into<f64>>(a: &[A]) -> f64 {
    a.iter()
        .map(|&x| {
            let x = x.into();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

pub fn cosine<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit vector in binary64; errors on the zero vector.
pub fn normalized<A: Copy + Into<f64>>(a: &[A]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(a.iter().map(|&x| x.into() / n).collect())
}

/// Sample Pearson correlation (two-pass).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantSequence);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Layer normalization of one row with affine gain and bias.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| ((v as f64 - mean) * inv * g as f64 + b as f64) as f32)
        .collect()
}

/// Indices of the `k` largest scores, ties broken by lowest index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Two-sided p-value for a Pearson `r` over `n` samples (t with n-2 dof).
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if n < 3 {
        return f64::NAN;
    }
    let dof = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = r * (dof / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof).expect("dof is positive");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn activation_examples() {
        assert_eq!(apply_activation(ActivationKind::Silu, 0.0), 0.0);
        assert_eq!(apply_activation(ActivationKind::Sigmoid, 0.0), 0.5);
        assert!((apply_activation(ActivationKind::Silu, 1.0) - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn negative_lobes_vanish() {
        for kind in [ActivationKind::Silu, ActivationKind::GeluExact] {
            let at = |x| apply_activation(kind, x);
            assert!(at(-1.0) < 0.0);
            assert!(at(-5.0) < 0.0 || at(-5.0).abs() < 1e-5);
            assert!(at(-20.0).abs() < 1e-6 && at(-20.0) <= 0.0);
            assert!(at(-20.0).abs() < at(-5.0).abs());
        }
        for kind in ActivationKind::ALL {
            for i in -200..=200 {
                assert!(apply_activation(kind, i as f64 / 10.0).is_finite());
            }
        }
    }

    #[test]
    fn gelu_variants_agree() {
        for i in -500..=500 {
            let x = i as f64 / 100.0;
            let a = apply_activation(ActivationKind::GeluExact, x);
            let b = apply_activation(ActivationKind::GeluTanh, x);
            assert!((a - b).abs() <= 1e-3, "x={x}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for kind in ActivationKind::ALL {
            for i in -40..=40 {
                let x = i as f64 / 8.0;
                let h = 1e-5;
                let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                assert!((fd - kind.derivative(x)).abs() < 1e-7, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            pearson(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::ConstantSequence)
        ));
        assert!(matches!(
            pearson(&[1., 2.], &[1., 2., 3.]),
            Err(Error::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0f32, 0.0], &[1.0f32, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0f32, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0f32, 1.0], &[1.0f32, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine(&[0.0f32, 0.0], &[1.0f32, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn softmax_and_norm_contracts() {
        let p = softmax(&[1000.0, 1001.0, -3.0, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let x = [3.0f32, -1.0, 0.25, 7.5, 2.0];
        let y = layer_norm(&x, &[1.0; 5], &[0.0; 5]);
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / 5.0;
        let var = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tensor_rejects_non_finite_and_bad_shapes() {
        assert!(Tensor2::new(2, 2, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
        assert!(Tensor2::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor1::new(vec![f32::INFINITY]).is_err());
        let a = Tensor2::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = a.transpose();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[14., 32., 32., 77.]);
        assert_eq!(a.matvec(&[1., 0., -1.]).unwrap(), vec![-2., -2.]);
    }

    #[test]
    fn p_value_sanity() {
        assert!(pearson_p_value(0.0, 100) > 0.99);
        assert!(pearson_p_value(0.9, 100) < 1e-6);
        // r=0.5, n=10: t = 1.63299, two-sided p ≈ 0.1411
        assert!((pearson_p_value(0.5, 10) - 0.1411).abs() < 5e-4);
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            xs in prop::collection::vec(-100.0f64..100.0, 3..40),
            seed in prop::collection::vec(-100.0f64..100.0, 40),
            scale in 0.01f64..50.0,
            shift in -100.0f64..100.0,
        ) {
            let ys: Vec<f64> = seed[..xs.len()].to_vec();
            if let (Ok(r1), Ok(r2)) = (pearson(&xs, &ys), pearson(&ys, &xs)) {
                prop_assert!((r1 - r2).abs() < 1e-9);
                let scaled: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
                let r3 = pearson(&scaled, &ys).unwrap();
                prop_assert!((r1 - r3).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_antipode(a in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            prop_assume!(norm(&a) > 1e-3);
            let neg: Vec<f32> = a.iter().map(|v| -v).collect();
            prop_assert!((cosine(&a, &neg).unwrap() + 1.0).abs() <= 1e-12);
        }
    }
}
