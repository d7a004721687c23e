//! Numeric kernel: dense tensors, the softmax family, KL, order statistics,
//! affine maps with hand-written reverse-mode gradients, and a seeded RNG.
//!
//! Everything is `f64` and every reduction runs in a fixed index order, so two
//! runs over the same inputs produce bit-identical results.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, shape, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(domain(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(domain(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(domain("tensor data must be finite"));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Builds a tensor from data already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape, vec![0.0; len])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(domain("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer; it must match the tensor's shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(domain("gradient length does not match tensor"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Extents of a rank-3 `[B, N, D]` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, n, d] => Ok((b, n, d)),
            _ => Err(domain(format!(
                "expected rank-3 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(domain(format!(
                "expected rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = self.shape[self.shape.len() - 1];
        self.data.chunks(cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_temperature(logits: &[f64], temperature: f64) -> Result<()> {
    if logits.is_empty() {
        return Err(domain("softmax of an empty vector"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(domain("logits must be finite"));
    }
    Ok(())
}

/// Temperature-scaled softmax, computed with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(logits, temperature)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(logits, temperature)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| (z - max) / temperature).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|s| s - lse).collect())
}

/// `KL(p || q)` in nats. Entries of `q` are floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape(&[p.len()], &[q.len()]));
    }
    if p.is_empty() {
        return Err(domain("KL of empty distributions"));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    // Rounding can leave a tiny negative residue for p == q.
    Ok(acc.max(0.0))
}

/// Direction of a Top-/Bottom-K selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    /// `≥`: keep the K largest scores.
    Top,
    /// `≤`: keep the K smallest scores.
    Bottom,
}

impl Polarity {
    /// Whether `a` ranks strictly ahead of `b` under this polarity.
    pub(crate) fn ahead(self, a: f64, b: f64) -> bool {
        match self {
            Polarity::Top => a > b,
            Polarity::Bottom => a < b,
        }
    }
}

/// K-th order statistic (1-based): the K-th largest score for
/// [`Polarity::Top`], the K-th smallest for [`Polarity::Bottom`].
pub fn kth_order_statistic(scores: &[f64], k: usize, polarity: Polarity) -> Result<f64> {
    if k == 0 || k > scores.len() {
        return Err(domain(format!(
            "order statistic K={k} out of range for {} scores",
            scores.len()
        )));
    }
    let mut work = scores.to_vec();
    let (_, kth, _) = match polarity {
        Polarity::Top => work.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a)),
        Polarity::Bottom => work.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b)),
    };
    Ok(*kth)
}

/// `y = W x + b` with gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    out_dim: usize,
    in_dim: usize,
    /// Row-major `[out × in]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_grad: Vec<f64>,
    pub bias_grad: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
            weight_grad: vec![0.0; out_dim * in_dim],
            bias_grad: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(
        out_dim: usize,
        in_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != out_dim * in_dim {
            return Err(shape(&[out_dim, in_dim], &[weight.len()]));
        }
        if bias.len() != out_dim {
            return Err(shape(&[out_dim], &[bias.len()]));
        }
        let mut map = Self::zeros(out_dim, in_dim);
        map.weight = weight;
        map.bias = bias;
        Ok(map)
    }

    pub fn identity(dim: usize) -> Self {
        let mut map = Self::zeros(dim, dim);
        for i in 0..dim {
            map.weight[i * dim + i] = 1.0;
        }
        map
    }

    /// Fan-in scaled normal weights (`std = gain / sqrt(in)`), zero bias.
    pub fn normal_init(out_dim: usize, in_dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let mut map = Self::zeros(out_dim, in_dim);
        let std = gain / (in_dim as f64).sqrt();
        for w in &mut map.weight {
            *w = std * rng.normal();
        }
        map
    }

    /// Kaiming-normal initialization for a layer followed by a ReLU-like unit.
    pub fn kaiming_normal(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        Self::normal_init(out_dim, in_dim, std::f64::consts::SQRT_2, rng)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(shape(&[self.in_dim], &[x.len()]));
        }
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked forward into a caller-provided buffer.
    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks(self.in_dim).zip(&self.bias))
        {
            let mut acc = *b;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }

    /// Accumulates weight and bias gradients for one input and returns the
    /// gradient with respect to `x`.
    pub fn backward(&mut self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(shape(&[self.in_dim], &[x.len()]));
        }
        if upstream.len() != self.out_dim {
            return Err(shape(&[self.out_dim], &[upstream.len()]));
        }
        let mut dx = vec![0.0; self.in_dim];
        self.backward_into(x, upstream, &mut dx);
        Ok(dx)
    }

    /// Unchecked backward; adds the input gradient into `dx`.
    pub(crate) fn backward_into(&mut self, x: &[f64], upstream: &[f64], dx: &mut [f64]) {
        for (o, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias_grad[o] += g;
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                self.weight_grad[row + i] += g * x[i];
                dx[i] += g * self.weight[row + i];
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = 0.0);
        self.bias_grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_is_zero(&self) -> bool {
        self.weight_grad
            .iter()
            .chain(&self.bias_grad)
            .all(|&g| g == 0.0)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU; smooth everywhere.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Seeded random stream. Equal `(seed, stream)` pairs and equal call
/// sequences reproduce identical draws.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn substream(&self, stream: u64) -> Rng {
        Rng::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}
