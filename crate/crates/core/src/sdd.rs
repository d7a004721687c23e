//! Spatial differentiable dropout: token scoring, Top/Bottom-K token masks
//! with straight-through gradients, and per-expert rank bottlenecks.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::tensor::{kth_order_statistic, AffineMap, Polarity, Rng, Tensor};

/// Channel reduction used to score a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreReducer {
    #[default]
    L2Norm,
    MeanAbs,
}

impl ScoreReducer {
    pub fn reduce(self, v: &[f64]) -> f64 {
        match self {
            ScoreReducer::L2Norm => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            ScoreReducer::MeanAbs => v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64,
        }
    }
}

/// One expert: selection polarity, base keep-ratio and a rank-`r` bottleneck
/// `down(up(x))` applied token-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    pub id: usize,
    pub polarity: Polarity,
    pub keep_ratio: f64,
    pub rank: usize,
    /// `[D → r]`, applied first.
    pub up: AffineMap,
    /// `[r → D]`.
    pub down: AffineMap,
}

impl ExpertSpec {
    /// Zero up-projection and fan-in scaled normal down-projection, so the
    /// expert output is exactly zero until the up-projection learns.
    pub fn new(
        id: usize,
        polarity: Polarity,
        keep_ratio: f64,
        rank: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(keep_ratio > 0.0 && keep_ratio < 1.0) {
            return Err(domain(format!(
                "expert {id}: keep ratio must lie in (0,1), got {keep_ratio}"
            )));
        }
        if rank == 0 || channels == 0 {
            return Err(domain(format!(
                "expert {id}: rank and channels must be positive"
            )));
        }
        Ok(Self {
            id,
            polarity,
            keep_ratio,
            rank,
            up: AffineMap::zeros(rank, channels),
            down: AffineMap::kaiming_normal(channels, rank, rng),
        })
    }

    /// Expert with caller-provided maps.
    pub fn with_maps(
        id: usize,
        polarity: Polarity,
        keep_ratio: f64,
        up: AffineMap,
        down: AffineMap,
    ) -> Result<Self> {
        if up.out_dim() != down.in_dim() || up.in_dim() != down.out_dim() {
            return Err(domain(format!(
                "expert {id}: bottleneck maps [{}→{}] and [{}→{}] do not compose",
                up.in_dim(),
                up.out_dim(),
                down.in_dim(),
                down.out_dim()
            )));
        }
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(domain(format!(
                "expert {id}: keep ratio {keep_ratio} out of range"
            )));
        }
        Ok(Self {
            id,
            polarity,
            keep_ratio,
            rank: up.out_dim(),
            up,
            down,
        })
    }

    pub fn channels(&self) -> usize {
        self.up.in_dim()
    }

    pub fn zero_grad(&mut self) {
        self.up.zero_grad();
        self.down.zero_grad();
    }
}

/// Binary `[B × N]` token mask with the per-sample budget that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    batch: usize,
    tokens: usize,
    bits: Vec<bool>,
    budgets: Vec<usize>,
}

impl TokenMask {
    /// Mask from explicit bits; budgets are the row counts. Rows may be empty.
    pub fn from_bits(batch: usize, tokens: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != batch * tokens {
            return Err(shape(&[batch, tokens], &[bits.len()]));
        }
        let budgets = bits
            .chunks(tokens)
            .map(|r| r.iter().filter(|&&b| b).count())
            .collect();
        Ok(Self {
            batch,
            tokens,
            bits,
            budgets,
        })
    }

    pub fn all_ones(batch: usize, tokens: usize) -> Self {
        Self {
            batch,
            tokens,
            bits: vec![true; batch * tokens],
            budgets: vec![tokens; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn get(&self, b: usize, n: usize) -> bool {
        self.bits[b * self.tokens + n]
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.bits[b * self.tokens..(b + 1) * self.tokens]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// `⌊N·q⌋`, clamped to at least one token.
pub fn token_budget(tokens: usize, keep_ratio: f64) -> usize {
    ((tokens as f64 * keep_ratio).floor() as usize).clamp(1, tokens.max(1))
}

/// Token-wise activation scores `[B × N]`.
pub fn token_scores(features: &Tensor, reducer: ScoreReducer) -> Result<Tensor> {
    let (b, n, d) = features.dims3()?;
    if d == 0 {
        return Err(domain("empty channel dimension"));
    }
    let scores = features
        .data()
        .chunks(d)
        .map(|v| reducer.reduce(v))
        .collect();
    Ok(Tensor::from_parts(vec![b, n], scores))
}

/// Top/Bottom-K mask with `K = max(1, ⌊N·q⌋)` on every row.
pub fn sdd_mask(scores: &Tensor, keep_ratio: f64, polarity: Polarity) -> Result<TokenMask> {
    let (b, n) = scores.dims2()?;
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(domain(format!(
            "keep ratio must lie in (0,1], got {keep_ratio}"
        )));
    }
    let k = token_budget(n, keep_ratio);
    sdd_mask_with_budgets(scores, &vec![k; b], polarity)
}

/// Mask with an explicit per-row budget. Scores ranked strictly ahead of the
/// K-th order statistic are kept; ties at the threshold keep lower indices.
pub fn sdd_mask_with_budgets(
    scores: &Tensor,
    budgets: &[usize],
    polarity: Polarity,
) -> Result<TokenMask> {
    let (b, n) = scores.dims2()?;
    if budgets.len() != b {
        return Err(shape(&[b], &[budgets.len()]));
    }
    let mut bits = vec![false; b * n];
    for (row_idx, (row, &k)) in scores.rows().zip(budgets).enumerate() {
        if k == 0 || k > n {
            return Err(domain(format!("budget {k} out of range for {n} tokens")));
        }
        let tau = kth_order_statistic(row, k, polarity)?;
        let out = &mut bits[row_idx * n..(row_idx + 1) * n];
        let mut kept = 0;
        for (bit, &s) in out.iter_mut().zip(row) {
            if polarity.ahead(s, tau) {
                *bit = true;
                kept += 1;
            }
        }
        for (bit, &s) in out.iter_mut().zip(row) {
            if kept == k {
                break;
            }
            if s == tau {
                *bit = true;
                kept += 1;
            }
        }
        debug_assert_eq!(kept, k);
    }
    Ok(TokenMask {
        batch: b,
        tokens: n,
        bits,
        budgets: budgets.to_vec(),
    })
}

/// Hidden activations kept for the backward pass of a bottleneck.
#[derive(Debug, Clone)]
pub struct BottleneckCache {
    /// `[B·N × r]`, row-major.
    pub hidden: Vec<f64>,
}

fn check_bottleneck(features: &Tensor, spec: &ExpertSpec) -> Result<(usize, usize, usize)> {
    let (b, n, d) = features.dims3()?;
    if spec.up.in_dim() != d || spec.down.out_dim() != d || spec.up.out_dim() != spec.down.in_dim()
    {
        return Err(domain(format!(
            "expert {}: bottleneck [{}→{}→{}] incompatible with {d} channels",
            spec.id,
            spec.up.in_dim(),
            spec.up.out_dim(),
            spec.down.out_dim()
        )));
    }
    Ok((b, n, d))
}

/// Token-wise `down(up(F[b,n,:]))`.
pub fn expert_bottleneck(features: &Tensor, spec: &ExpertSpec) -> Result<Tensor> {
    Ok(bottleneck_forward(features, spec)?.0)
}

pub(crate) fn bottleneck_forward(
    features: &Tensor,
    spec: &ExpertSpec,
) -> Result<(Tensor, BottleneckCache)> {
    let (b, n, d) = check_bottleneck(features, spec)?;
    let r = spec.up.out_dim();
    let mut hidden = vec![0.0; b * n * r];
    let mut out = vec![0.0; b * n * d];
    for ((x, h), y) in features
        .data()
        .chunks(d)
        .zip(hidden.chunks_mut(r))
        .zip(out.chunks_mut(d))
    {
        spec.up.forward_into(x, h);
        spec.down.forward_into(h, y);
    }
    Ok((
        Tensor::from_parts(vec![b, n, d], out),
        BottleneckCache { hidden },
    ))
}

/// Accumulates both maps' gradients; returns the gradient w.r.t. the input.
pub fn expert_bottleneck_backward(
    features: &Tensor,
    spec: &mut ExpertSpec,
    cache: &BottleneckCache,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (b, n, d) = check_bottleneck(features, spec)?;
    if upstream.shape() != features.shape() {
        return Err(shape(features.shape(), upstream.shape()));
    }
    let r = spec.up.out_dim();
    let mut dx = vec![0.0; b * n * d];
    let mut dh = vec![0.0; r];
    for (((x, h), g), dxi) in features
        .data()
        .chunks(d)
        .zip(cache.hidden.chunks(r))
        .zip(upstream.data().chunks(d))
        .zip(dx.chunks_mut(d))
    {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        dh.iter_mut().for_each(|v| *v = 0.0);
        spec.down.backward_into(h, g, &mut dh);
        spec.up.backward_into(x, &dh, dxi);
    }
    Ok(Tensor::from_parts(vec![b, n, d], dx))
}

fn check_mask(mask: &TokenMask, features: &Tensor) -> Result<usize> {
    let (b, n, d) = features.dims3()?;
    if mask.batch != b || mask.tokens != n {
        return Err(shape(&[b, n], &[mask.batch, mask.tokens]));
    }
    Ok(d)
}

/// Zeroes dropped tokens; kept tokens pass through unchanged.
pub fn sparsify(mask: &TokenMask, features: &Tensor) -> Result<Tensor> {
    let d = check_mask(mask, features)?;
    let mut out = features.clone();
    for (tok, &keep) in out.data_mut().chunks_mut(d).zip(&mask.bits) {
        if !keep {
            tok.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Straight-through backward: the upstream gradient masked by the same
/// frozen bits. Nothing flows into the selection itself.
pub fn sparsify_backward(mask: &TokenMask, upstream: &Tensor) -> Result<Tensor> {
    sparsify(mask, upstream)
}

/// Channel-wise variant of the dropout, kept as a diagnostic: channels are
/// scored across tokens per sample and the Top/Bottom-K channels survive.
pub fn channel_sparsify(
    features: &Tensor,
    keep_ratio: f64,
    polarity: Polarity,
    reducer: ScoreReducer,
) -> Result<Tensor> {
    let (b, n, d) = features.dims3()?;
    let data = features.data();
    let mut scores = Vec::with_capacity(b * d);
    let mut column = vec![0.0; n];
    for bi in 0..b {
        for c in 0..d {
            for (t, v) in column.iter_mut().enumerate() {
                *v = data[(bi * n + t) * d + c];
            }
            scores.push(reducer.reduce(&column));
        }
    }
    let mask = sdd_mask(
        &Tensor::from_parts(vec![b, d], scores),
        keep_ratio,
        polarity,
    )?;
    let mut out = features.clone();
    for bi in 0..b {
        for t in 0..n {
            for c in 0..d {
                if !mask.get(bi, c) {
                    out.data_mut()[(bi * n + t) * d + c] = 0.0;
                }
            }
        }
    }
    Ok(out)
}
