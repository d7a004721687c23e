//! Domain-aware routing, the activation sparsity gate, and the aggregated
//! mixture-of-activation-sparsity-experts layer.
//!
//! Routing is dense: every expert receives a nonzero simplex weight computed
//! from the low-activation half of the tokens. The sparsity gate perturbs
//! each expert's keep-ratio per sample; the resulting budgets are discrete,
//! so the gate's own parameters receive no gradient from the task loss.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::sdd::{
    bottleneck_forward, expert_bottleneck_backward, sdd_mask_with_budgets, token_budget,
    token_scores, BottleneckCache, ExpertSpec, ScoreReducer, TokenMask,
};
use crate::tensor::{softmax, AffineMap, Polarity, Rng, Tensor};

/// Per-sample expert weights `[B × E]`; each row lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    pub phi: Tensor,
}

impl RoutingWeights {
    pub fn row(&self, b: usize) -> &[f64] {
        self.phi.row(b)
    }

    /// Mean routing weight per expert over the batch.
    pub fn mean_per_expert(&self) -> Vec<f64> {
        let (b, e) = self.phi.dims2().expect("routing weights are rank 2");
        let mut acc = vec![0.0; e];
        for row in self.phi.rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= b as f64);
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeepRatioAdjustment {
    /// Raw offsets `[B × E]`, each in `(-1, 1)`.
    pub epsilon: Tensor,
    pub eta: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Clipped ratios `[B × E]`.
    pub adjusted: Tensor,
    /// `max(1, ⌊N·q̂⌋)`, row-major `[B × E]`.
    pub budgets: Vec<usize>,
}

impl KeepRatioAdjustment {
    pub fn budget(&self, b: usize, expert: usize) -> usize {
        let e = self.adjusted.shape()[1];
        self.budgets[b * e + expert]
    }
}

/// Routing head (low-activation pooled features → E logits) and sparsity
/// gate head (full pooled features → E offsets).
#[derive(Debug, Clone, PartialEq)]
pub struct GatingHeads {
    pub dar: AffineMap,
    pub asg: AffineMap,
}

impl GatingHeads {
    /// Zero routing head (uniform routing at start) and a fan-in scaled
    /// sparsity gate.
    pub fn new(channels: usize, experts: usize, rng: &mut Rng) -> Self {
        Self {
            dar: AffineMap::zeros(experts, channels),
            asg: AffineMap::normal_init(experts, channels, 1.0, rng),
        }
    }

    pub fn zeros(channels: usize, experts: usize) -> Self {
        Self {
            dar: AffineMap::zeros(experts, channels),
            asg: AffineMap::zeros(experts, channels),
        }
    }

    pub fn experts(&self) -> usize {
        self.dar.out_dim()
    }

    pub fn zero_grad(&mut self) {
        self.dar.zero_grad();
        self.asg.zero_grad();
    }
}

/// Knobs shared by the router and the sparsity gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    pub eta: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub reducer: ScoreReducer,
    /// Disables the sparsity gate: every expert uses its base ratio.
    pub use_asg: bool,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            q_min: 0.05,
            q_max: 0.95,
            reducer: ScoreReducer::L2Norm,
            use_asg: true,
        }
    }
}

impl GatingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_min > 0.0 && self.q_min < self.q_max && self.q_max <= 1.0) {
            return Err(domain(format!(
                "keep-ratio bounds must satisfy 0 < q_min < q_max <= 1, got [{}, {}]",
                self.q_min, self.q_max
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(domain(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

struct DarCache {
    low_mask: TokenMask,
    pooled: Vec<f64>,
}

fn mean_pool(features: &Tensor, mask: Option<&TokenMask>) -> Vec<f64> {
    let (b, n, d) = features.dims3().expect("rank-3 features");
    let mut pooled = vec![0.0; b * d];
    for (bi, out) in pooled.chunks_mut(d).enumerate() {
        let mut count = 0usize;
        for t in 0..n {
            if mask.map_or(true, |m| m.get(bi, t)) {
                let tok = &features.data()[(bi * n + t) * d..(bi * n + t + 1) * d];
                for (o, v) in out.iter_mut().zip(tok) {
                    *o += v;
                }
                count += 1;
            }
        }
        out.iter_mut().for_each(|o| *o /= count.max(1) as f64);
    }
    pooled
}

fn check_heads(features: &Tensor, heads: &GatingHeads) -> Result<(usize, usize, usize)> {
    let (b, n, d) = features.dims3()?;
    if heads.dar.in_dim() != d || heads.asg.in_dim() != d {
        return Err(shape(&[d], &[heads.dar.in_dim(), heads.asg.in_dim()]));
    }
    if heads.dar.out_dim() != heads.asg.out_dim() {
        return Err(domain("routing and gate heads disagree on expert count"));
    }
    Ok((b, n, d))
}

fn low_activation_mask(features: &Tensor, reducer: ScoreReducer) -> Result<TokenMask> {
    let (b, n, _) = features.dims3()?;
    if n < 2 {
        return Err(domain(format!("routing needs at least 2 tokens, got {n}")));
    }
    let scores = token_scores(features, reducer)?;
    sdd_mask_with_budgets(&scores, &vec![n / 2; b], Polarity::Bottom)
}

fn route_with_mask(
    features: &Tensor,
    heads: &GatingHeads,
    low_mask: TokenMask,
) -> Result<(RoutingWeights, DarCache)> {
    let (b, _, d) = features.dims3()?;
    let e = heads.experts();
    let pooled = mean_pool(features, Some(&low_mask));
    let mut phi = Vec::with_capacity(b * e);
    let mut logits = vec![0.0; e];
    for p in pooled.chunks(d) {
        heads.dar.forward_into(p, &mut logits);
        phi.extend(softmax(&logits, 1.0)?);
    }
    Ok((
        RoutingWeights {
            phi: Tensor::from_parts(vec![b, e], phi),
        },
        DarCache { low_mask, pooled },
    ))
}

/// Routing weights from the bottom-half (low-activation) tokens:
/// mask with `K_low = ⌊N/2⌋`, mean-pool the survivors, affine head, softmax.
pub fn dar_route(
    features: &Tensor,
    heads: &GatingHeads,
    reducer: ScoreReducer,
) -> Result<RoutingWeights> {
    check_heads(features, heads)?;
    let mask = low_activation_mask(features, reducer)?;
    Ok(route_with_mask(features, heads, mask)?.0)
}

/// `tanh(asg(mean over tokens of F))`, shape `[B × E]`.
pub fn asg_offsets(features: &Tensor, heads: &GatingHeads) -> Result<Tensor> {
    let (b, _, d) = check_heads(features, heads)?;
    let e = heads.experts();
    let pooled = mean_pool(features, None);
    let mut eps = vec![0.0; b * e];
    for (p, out) in pooled.chunks(d).zip(eps.chunks_mut(e)) {
        heads.asg.forward_into(p, out);
        out.iter_mut().for_each(|v| *v = v.tanh());
    }
    Ok(Tensor::from_parts(vec![b, e], eps))
}

/// `q̂ = clip(q + η·ε, q_min, q_max)` and `K̂ = max(1, ⌊N·q̂⌋)`.
pub fn adjust_keep_ratio(
    base: &[f64],
    epsilon: &Tensor,
    eta: f64,
    q_min: f64,
    q_max: f64,
    tokens: usize,
) -> Result<KeepRatioAdjustment> {
    if !(q_min < q_max) {
        return Err(domain(format!(
            "q_min ({q_min}) must be below q_max ({q_max})"
        )));
    }
    if tokens == 0 {
        return Err(domain("token count must be positive"));
    }
    let (b, e) = epsilon.dims2()?;
    if base.len() != e {
        return Err(shape(&[e], &[base.len()]));
    }
    let mut adjusted = Vec::with_capacity(b * e);
    let mut budgets = Vec::with_capacity(b * e);
    for row in epsilon.rows() {
        for (&q, &eps) in base.iter().zip(row) {
            let qh = (q + eta * eps).clamp(q_min, q_max);
            adjusted.push(qh);
            budgets.push(token_budget(tokens, qh));
        }
    }
    Ok(KeepRatioAdjustment {
        epsilon: epsilon.clone(),
        eta,
        q_min,
        q_max,
        adjusted: Tensor::from_parts(vec![b, e], adjusted),
        budgets,
    })
}

/// Discrete choices made in a forward pass. Replaying a selection makes the
/// layer a smooth function of its parameters, which is what the
/// straight-through backward differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct MoaseSelection {
    pub low_mask: TokenMask,
    pub expert_masks: Vec<TokenMask>,
}

#[derive(Debug, Clone)]
pub struct MoaseCache {
    pub selection: MoaseSelection,
    pub routing: RoutingWeights,
    pub adjustment: Option<KeepRatioAdjustment>,
    pooled_low: Vec<f64>,
    expert_outputs: Vec<Tensor>,
    bottlenecks: Vec<BottleneckCache>,
}

#[derive(Debug, Clone)]
pub struct MoaseOutput {
    pub output: Tensor,
    pub cache: MoaseCache,
}

fn check_experts(features: &Tensor, experts: &[ExpertSpec], heads: &GatingHeads) -> Result<()> {
    check_heads(features, heads)?;
    if experts.is_empty() {
        return Err(domain("at least one expert is required"));
    }
    if experts.len() != heads.experts() {
        return Err(domain(format!(
            "{} experts but heads produce {} outputs",
            experts.len(),
            heads.experts()
        )));
    }
    Ok(())
}

/// `Y(b) = Σ_i φ(b,i) · M_i ⊙ f_i(F)(b)` with polarity- and gate-adjusted
/// budgets per expert.
pub fn moase_forward(
    features: &Tensor,
    experts: &[ExpertSpec],
    heads: &GatingHeads,
    config: &GatingConfig,
) -> Result<MoaseOutput> {
    moase_forward_with(features, experts, heads, config, None)
}

/// Forward pass, optionally replaying a previously recorded selection.
pub fn moase_forward_with(
    features: &Tensor,
    experts: &[ExpertSpec],
    heads: &GatingHeads,
    config: &GatingConfig,
    replay: Option<&MoaseSelection>,
) -> Result<MoaseOutput> {
    check_experts(features, experts, heads)?;
    let (b, n, d) = features.dims3()?;
    let e = experts.len();

    let low_mask = match replay {
        Some(sel) => sel.low_mask.clone(),
        None => low_activation_mask(features, config.reducer)?,
    };
    let (routing, dar_cache) = route_with_mask(features, heads, low_mask)?;

    let (expert_masks, adjustment) = match replay {
        Some(sel) => {
            if sel.expert_masks.len() != e {
                return Err(domain("replayed selection has the wrong expert count"));
            }
            (sel.expert_masks.clone(), None)
        }
        None => {
            let base: Vec<f64> = experts.iter().map(|x| x.keep_ratio).collect();
            let eps = if config.use_asg {
                asg_offsets(features, heads)?
            } else {
                Tensor::zeros(vec![b, e])
            };
            let adj = adjust_keep_ratio(&base, &eps, config.eta, config.q_min, config.q_max, n)?;
            let scores = token_scores(features, config.reducer)?;
            let masks = experts
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let budgets: Vec<usize> = (0..b).map(|bi| adj.budget(bi, i)).collect();
                    sdd_mask_with_budgets(&scores, &budgets, x.polarity)
                })
                .collect::<Result<Vec<_>>>()?;
            (masks, Some(adj))
        }
    };

    let mut out = vec![0.0; b * n * d];
    let mut expert_outputs = Vec::with_capacity(e);
    let mut bottlenecks = Vec::with_capacity(e);
    for (i, (expert, mask)) in experts.iter().zip(&expert_masks).enumerate() {
        let (f, cache) = bottleneck_forward(features, expert)?;
        for bi in 0..b {
            let w = routing.phi.row(bi)[i];
            for t in 0..n {
                if !mask.get(bi, t) {
                    continue;
                }
                let base = (bi * n + t) * d;
                for c in 0..d {
                    out[base + c] += w * f.data()[base + c];
                }
            }
        }
        expert_outputs.push(f);
        bottlenecks.push(cache);
    }

    Ok(MoaseOutput {
        output: Tensor::from_parts(vec![b, n, d], out),
        cache: MoaseCache {
            selection: MoaseSelection {
                low_mask: dar_cache.low_mask,
                expert_masks,
            },
            routing,
            adjustment,
            pooled_low: dar_cache.pooled,
            expert_outputs,
            bottlenecks,
        },
    })
}

/// Backward through routing, bottlenecks and straight-through masks.
/// Accumulates parameter gradients and returns `dL/dF`.
pub fn moase_backward(
    features: &Tensor,
    experts: &mut [ExpertSpec],
    heads: &mut GatingHeads,
    cache: &MoaseCache,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (b, n, d) = features.dims3()?;
    if upstream.shape() != features.shape() {
        return Err(shape(features.shape(), upstream.shape()));
    }
    let e = experts.len();
    let dy = upstream.data();
    let mut dphi = vec![0.0; b * e];
    let mut dx = Tensor::zeros(vec![b, n, d]);

    for i in 0..e {
        let mask = &cache.selection.expert_masks[i];
        let f = cache.expert_outputs[i].data();
        let mut df = vec![0.0; b * n * d];
        for bi in 0..b {
            let w = cache.routing.phi.row(bi)[i];
            let mut acc = 0.0;
            for t in 0..n {
                if !mask.get(bi, t) {
                    continue;
                }
                let base = (bi * n + t) * d;
                for c in 0..d {
                    acc += dy[base + c] * f[base + c];
                    df[base + c] = w * dy[base + c];
                }
            }
            dphi[bi * e + i] = acc;
        }
        let df = Tensor::from_parts(vec![b, n, d], df);
        let g = expert_bottleneck_backward(features, &mut experts[i], &cache.bottlenecks[i], &df)?;
        for (a, v) in dx.data_mut().iter_mut().zip(g.data()) {
            *a += v;
        }
    }

    // softmax backward, then the routing head and the low-token mean pool
    let mut dpooled = vec![0.0; d];
    for bi in 0..b {
        let phi = cache.routing.phi.row(bi);
        let g = &dphi[bi * e..(bi + 1) * e];
        let dot: f64 = phi.iter().zip(g).map(|(p, v)| p * v).sum();
        let dlogits: Vec<f64> = phi.iter().zip(g).map(|(p, v)| p * (v - dot)).collect();
        dpooled.iter_mut().for_each(|v| *v = 0.0);
        heads.dar.backward_into(
            &cache.pooled_low[bi * d..(bi + 1) * d],
            &dlogits,
            &mut dpooled,
        );
        let kept = cache.selection.low_mask.row(bi);
        let count = kept.iter().filter(|&&k| k).count().max(1) as f64;
        for (t, &k) in kept.iter().enumerate() {
            if !k {
                continue;
            }
            let base = (bi * n + t) * d;
            for c in 0..d {
                dx.data_mut()[base + c] += dpooled[c] / count;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_features(rng: &mut Rng, b: usize, n: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![b, n, d],
            (0..b * n * d).map(|_| rng.normal()).collect(),
        )
        .unwrap()
    }

    fn random_expert(
        rng: &mut Rng,
        id: usize,
        pol: Polarity,
        q: f64,
        r: usize,
        d: usize,
    ) -> ExpertSpec {
        let mut up = AffineMap::normal_init(r, d, 1.0, rng);
        let mut down = AffineMap::normal_init(d, r, 1.0, rng);
        up.bias.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        down.bias.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        ExpertSpec::with_maps(id, pol, q, up, down).unwrap()
    }

    #[test]
    fn zero_router_is_uniform() {
        let mut rng = Rng::new(1, 0);
        let f = random_features(&mut rng, 3, 4, 5);
        let heads = GatingHeads::zeros(5, 4);
        let phi = dar_route(&f, &heads, ScoreReducer::L2Norm).unwrap();
        assert!(phi.phi.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn low_mask_keeps_half() {
        let mut rng = Rng::new(2, 0);
        let f = random_features(&mut rng, 2, 4, 3);
        let m = low_activation_mask(&f, ScoreReducer::L2Norm).unwrap();
        for b in 0..2 {
            assert_eq!(m.row(b).iter().filter(|&&k| k).count(), 2);
        }
        let single = random_features(&mut rng, 1, 1, 3);
        assert!(dar_route(&single, &GatingHeads::zeros(3, 2), ScoreReducer::L2Norm).is_err());
    }

    #[test]
    fn random_router_rows_on_simplex() {
        let mut rng = Rng::new(3, 0);
        let f = random_features(&mut rng, 3, 6, 4);
        let mut heads = GatingHeads::zeros(4, 4);
        heads.dar = AffineMap::normal_init(4, 4, 2.0, &mut rng);
        let phi = dar_route(&f, &heads, ScoreReducer::MeanAbs).unwrap();
        for row in phi.phi.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn asg_examples() {
        let mut rng = Rng::new(4, 0);
        let f = random_features(&mut rng, 2, 3, 2);
        let zero = GatingHeads::zeros(2, 3);
        assert!(asg_offsets(&f, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let mut heads = GatingHeads::zeros(2, 1);
        heads.asg = AffineMap::from_parts(1, 2, vec![100.0, -3.0], vec![0.5]).unwrap();
        let eps = asg_offsets(&f, &heads).unwrap();
        for (bi, &v) in eps.data().iter().enumerate() {
            assert!(v.abs() <= 1.0);
            let mut pooled = [0.0; 2];
            for t in 0..3 {
                pooled[0] += f.data()[(bi * 3 + t) * 2] / 3.0;
                pooled[1] += f.data()[(bi * 3 + t) * 2 + 1] / 3.0;
            }
            let want = (100.0 * pooled[0] - 3.0 * pooled[1] + 0.5).tanh();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adjust_examples() {
        let zero = Tensor::zeros(vec![2, 2]);
        let adj = adjust_keep_ratio(&[0.5, 0.25], &zero, 0.1, 0.05, 0.95, 8).unwrap();
        assert_eq!(adj.adjusted.data(), &[0.5, 0.25, 0.5, 0.25]);

        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let adj = adjust_keep_ratio(&[0.5], &one, 0.1, 0.05, 0.95, 10).unwrap();
        assert!((adj.adjusted.data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(adj.budgets, vec![6]);

        let adj = adjust_keep_ratio(&[0.93], &one, 0.1, 0.05, 0.95, 10).unwrap();
        assert_eq!(adj.adjusted.data()[0], 0.95);
        assert_eq!(adj.budgets, vec![9]);

        assert!(adjust_keep_ratio(&[0.5], &one, 0.1, 0.5, 0.5, 10).is_err());
    }

    #[test]
    fn single_expert_gets_full_weight() {
        let mut rng = Rng::new(5, 0);
        let f = random_features(&mut rng, 2, 4, 3);
        let expert = random_expert(&mut rng, 1, Polarity::Top, 0.5, 2, 3);
        let mut heads = GatingHeads::zeros(3, 1);
        heads.dar = AffineMap::normal_init(1, 3, 1.0, &mut rng);
        let cfg = GatingConfig {
            use_asg: false,
            ..Default::default()
        };
        let out = moase_forward(&f, std::slice::from_ref(&expert), &heads, &cfg).unwrap();
        assert!(out.cache.routing.phi.data().iter().all(|&p| p == 1.0));
        let scores = token_scores(&f, cfg.reducer).unwrap();
        let mask = crate::sdd::sdd_mask(&scores, 0.5, Polarity::Top).unwrap();
        let want =
            crate::sdd::sparsify(&mask, &crate::sdd::expert_bottleneck(&f, &expert).unwrap())
                .unwrap();
        assert_eq!(out.output, want);
    }

    #[test]
    fn identical_keep_all_experts_ignore_routing() {
        let mut rng = Rng::new(6, 0);
        let f = random_features(&mut rng, 3, 4, 3);
        let proto = random_expert(&mut rng, 1, Polarity::Top, 1.0, 2, 3);
        let experts: Vec<ExpertSpec> = (0..3)
            .map(|i| ExpertSpec {
                id: i + 1,
                polarity: if i % 2 == 0 {
                    Polarity::Top
                } else {
                    Polarity::Bottom
                },
                ..proto.clone()
            })
            .collect();
        let mut heads = GatingHeads::zeros(3, 3);
        heads.dar = AffineMap::normal_init(3, 3, 3.0, &mut rng);
        let cfg = GatingConfig {
            q_max: 1.0,
            use_asg: false,
            ..Default::default()
        };
        let out = moase_forward(&f, &experts, &heads, &cfg).unwrap();
        let want = crate::sdd::expert_bottleneck(&f, &proto).unwrap();
        assert!(out.output.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn two_expert_weighted_sum() {
        // Hand-set routing of [0.25, 0.75] via logits [0, ln 3].
        let f = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let mk = |scale: f64, pol| {
            ExpertSpec::with_maps(
                1,
                pol,
                1.0,
                AffineMap::identity(1),
                AffineMap::from_parts(1, 1, vec![scale], vec![0.0]).unwrap(),
            )
            .unwrap()
        };
        let experts = vec![mk(2.0, Polarity::Top), mk(-1.0, Polarity::Bottom)];
        let mut heads = GatingHeads::zeros(1, 2);
        heads.dar.bias = vec![0.0, 3f64.ln()];
        let cfg = GatingConfig {
            q_max: 1.0,
            use_asg: false,
            ..Default::default()
        };
        let out = moase_forward(&f, &experts, &heads, &cfg).unwrap();
        // token n: 0.25·2x + 0.75·(−x) = −0.25x
        assert!((out.output.data()[0] - (-0.25)).abs() < 1e-12);
        assert!((out.output.data()[1] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn reduces_to_plain_mixture_with_keep_all_identity_experts() {
        let mut rng = Rng::new(7, 0);
        let f = random_features(&mut rng, 2, 4, 3);
        let experts: Vec<ExpertSpec> = (0..4)
            .map(|i| {
                ExpertSpec::with_maps(
                    i + 1,
                    Polarity::Top,
                    1.0,
                    AffineMap::identity(3),
                    AffineMap::identity(3),
                )
                .unwrap()
            })
            .collect();
        let mut heads = GatingHeads::zeros(3, 4);
        heads.dar = AffineMap::normal_init(4, 3, 1.0, &mut rng);
        let cfg = GatingConfig {
            q_max: 1.0,
            use_asg: false,
            ..Default::default()
        };
        let out = moase_forward(&f, &experts, &heads, &cfg).unwrap();
        // Σ φ_i · x = x because φ is on the simplex
        assert!(out.output.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (b, n, d, e) = (2, 6, 4, 4);
        let mut rng = Rng::new(8, 0);
        let cfg = GatingConfig::default();
        let rel = |a: f64, x: f64| (a - x).abs() / a.abs().max(x.abs()).max(1e-7);
        for _ in 0..10 {
            let f = random_features(&mut rng, b, n, d);
            let mut experts: Vec<ExpertSpec> = [
                (Polarity::Top, 0.5, 4),
                (Polarity::Top, 0.25, 4),
                (Polarity::Bottom, 0.5, 1),
                (Polarity::Bottom, 0.25, 1),
            ]
            .iter()
            .enumerate()
            .map(|(i, &(p, q, r))| random_expert(&mut rng, i + 1, p, q, r, d))
            .collect();
            let mut heads = GatingHeads::new(d, e, &mut rng);
            heads.dar = AffineMap::normal_init(e, d, 1.0, &mut rng);
            let u = random_features(&mut rng, b, n, d);

            let fwd = moase_forward(&f, &experts, &heads, &cfg).unwrap();
            let sel = fwd.cache.selection.clone();
            let loss = |x: &Tensor, ex: &[ExpertSpec], hd: &GatingHeads| -> f64 {
                let y = moase_forward_with(x, ex, hd, &cfg, Some(&sel))
                    .unwrap()
                    .output;
                y.data().iter().zip(u.data()).map(|(a, w)| a * w).sum()
            };
            experts.iter_mut().for_each(ExpertSpec::zero_grad);
            heads.zero_grad();
            let dx = moase_backward(&f, &mut experts, &mut heads, &fwd.cache, &u).unwrap();
            let h = 1e-5;
            for i in 0..f.len() {
                let mut fp = f.clone();
                let mut fm = f.clone();
                fp.data_mut()[i] += h;
                fm.data_mut()[i] -= h;
                let fd = (loss(&fp, &experts, &heads) - loss(&fm, &experts, &heads)) / (2.0 * h);
                assert!(
                    rel(dx.data()[i], fd) <= 1e-3,
                    "input {i}: {} vs {fd}",
                    dx.data()[i]
                );
            }
            for j in 0..heads.dar.weight.len() {
                let mut hp = heads.clone();
                let mut hm = heads.clone();
                hp.dar.weight[j] += h;
                hm.dar.weight[j] -= h;
                let fd = (loss(&f, &experts, &hp) - loss(&f, &experts, &hm)) / (2.0 * h);
                assert!(rel(heads.dar.weight_grad[j], fd) <= 1e-3);
            }
            assert!(heads.asg.grad_is_zero());
            for k in 0..e {
                for j in 0..experts[k].up.weight.len() {
                    let mut ep = experts.clone();
                    let mut em = experts.clone();
                    ep[k].up.weight[j] += h;
                    em[k].up.weight[j] -= h;
                    let fd = (loss(&f, &ep, &heads) - loss(&f, &em, &heads)) / (2.0 * h);
                    assert!(rel(experts[k].up.weight_grad[j], fd) <= 1e-3);
                }
            }
        }
    }

    #[test]
    fn budgets_stay_in_range() {
        let mut rng = Rng::new(9, 0);
        for _ in 0..200 {
            let n = 1 + rng.below(16);
            let e = 1 + rng.below(6);
            let eps = Tensor::new(
                vec![1, e],
                (0..e).map(|_| 2.0 * rng.uniform() - 1.0).collect(),
            )
            .unwrap();
            let base: Vec<f64> = (0..e).map(|_| 0.01 + 0.98 * rng.uniform()).collect();
            let adj = adjust_keep_ratio(&base, &eps, 0.1, 0.05, 0.95, n).unwrap();
            for (&k, &q) in adj.budgets.iter().zip(adj.adjusted.data()) {
                assert!((1..=n).contains(&k));
                assert!((0.05..=0.95).contains(&q));
            }
        }
    }
}
