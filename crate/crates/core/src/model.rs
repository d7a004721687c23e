//! Small token-structured classifier hosting the expert mixture, the
//! student/teacher/source parameter triple, Adam, stochastic restoration and
//! checkpoint files.
//!
//! Forward path for one sample:
//!
//! ```text
//! x ─embed→ T[N×D] ─┬─ block(T) + moase(T) ─gelu─┐
//!                   └───────── residual ────────+→ H ─mean→ g ─dropout─classifier→ z
//! ```
//!
//! The expert up-projections start at zero, so a freshly built model is the
//! plain backbone exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, shape, Error, Result};
use crate::gating::{
    moase_backward, moase_forward_with, GatingConfig, GatingHeads, MoaseCache, MoaseSelection,
};
use crate::sdd::ExpertSpec;
use crate::tensor::{gelu, gelu_grad, log_softmax, softmax, AffineMap, Polarity, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub tokens: usize,
    pub channels: usize,
    pub classes: usize,
    pub experts: usize,
    /// Rank of the high-capacity experts; low-capacity experts use a quarter.
    pub hidden_size: usize,
    /// Number of Top-K (domain-agnostic) experts; the rest are Bottom-K.
    /// `None` splits the experts evenly.
    pub agnostic_experts: Option<usize>,
    /// Student-side dropout on the pooled feature. The teacher always runs
    /// without it.
    pub dropout: f64,
    /// When false the expert branch is skipped entirely.
    pub use_moase: bool,
    pub gating: GatingConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            tokens: 8,
            channels: 8,
            classes: 4,
            experts: 4,
            hidden_size: 8,
            agnostic_experts: None,
            dropout: 0.1,
            use_moase: true,
            gating: GatingConfig::default(),
        }
    }
}

/// One expert's place in the layout: polarity, base keep-ratio, rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertSlot {
    pub polarity: Polarity,
    pub keep_ratio: f64,
    pub rank: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("input_dim", self.input_dim),
            ("tokens", self.tokens),
            ("channels", self.channels),
            ("classes", self.classes),
            ("experts", self.experts),
            ("hidden_size", self.hidden_size),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(crate::error::config(
                    format!("model.{name}"),
                    "must be at least 1",
                ));
            }
        }
        if self.experts % 2 != 0 {
            return Err(crate::error::config(
                "model.experts",
                "expert count must be even",
            ));
        }
        if self.tokens < 2 {
            return Err(crate::error::config(
                "model.tokens",
                "routing needs at least 2 tokens",
            ));
        }
        if let Some(a) = self.agnostic_experts {
            if a > self.experts {
                return Err(crate::error::config(
                    "model.agnostic_experts",
                    "cannot exceed the expert count",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(crate::error::config("model.dropout", "must lie in [0, 1)"));
        }
        self.gating
            .validate()
            .map_err(|e| crate::error::config("model.gating", e.to_string()))
    }

    /// Expert layout. Each polarity group spans keep-ratios
    /// `0.5·(m−j)/m` for `j = 0..m`, so a group of two gets {1/2, 1/4}.
    /// Top-K experts use the full hidden size, Bottom-K experts a quarter.
    pub fn expert_layout(&self) -> Vec<ExpertSlot> {
        let agnostic = self.agnostic_experts.unwrap_or(self.experts / 2);
        let specific = self.experts - agnostic;
        let low_rank = (self.hidden_size / 4).max(1);
        let group = |count: usize, polarity, rank| {
            (0..count).map(move |j| ExpertSlot {
                polarity,
                keep_ratio: 0.5 * (count - j) as f64 / count as f64,
                rank,
            })
        };
        group(agnostic, Polarity::Top, self.hidden_size)
            .chain(group(specific, Polarity::Bottom, low_rank))
            .collect()
    }
}

/// All learnable tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: AffineMap,
    pub block: AffineMap,
    pub experts: Vec<ExpertSpec>,
    pub heads: GatingHeads,
    pub classifier: AffineMap,
}

impl Params {
    pub fn init(config: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.tokens, config.channels);
        let embed = AffineMap::normal_init(n * d, config.input_dim, 1.0, rng);
        let block = AffineMap::normal_init(d, d, 1.0, rng);
        let experts = config
            .expert_layout()
            .into_iter()
            .enumerate()
            .map(|(i, slot)| {
                ExpertSpec::new(i + 1, slot.polarity, slot.keep_ratio, slot.rank, d, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = GatingHeads::new(d, config.experts, rng);
        let classifier = AffineMap::normal_init(config.classes, d, 1.0, rng);
        Ok(Self {
            embed,
            block,
            experts,
            heads,
            classifier,
        })
    }

    /// Named maps in a fixed order; every flat view follows this order.
    pub fn maps(&self) -> Vec<(String, &AffineMap)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("block".to_string(), &self.block),
        ];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("expert{i}.up"), &e.up));
            out.push((format!("expert{i}.down"), &e.down));
        }
        out.push(("router.dar".to_string(), &self.heads.dar));
        out.push(("router.asg".to_string(), &self.heads.asg));
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    pub fn maps_mut(&mut self) -> Vec<&mut AffineMap> {
        let mut out = vec![&mut self.embed, &mut self.block];
        for e in &mut self.experts {
            out.push(&mut e.up);
            out.push(&mut e.down);
        }
        out.push(&mut self.heads.dar);
        out.push(&mut self.heads.asg);
        out.push(&mut self.classifier);
        out
    }

    pub fn param_count(&self) -> usize {
        self.maps().iter().map(|(_, m)| m.param_count()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, m) in self.maps() {
            out.extend_from_slice(&m.weight);
            out.extend_from_slice(&m.bias);
        }
        out
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, m) in self.maps() {
            out.extend_from_slice(&m.weight_grad);
            out.extend_from_slice(&m.bias_grad);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape(&[self.param_count()], &[flat.len()]));
        }
        let mut offset = 0;
        for m in self.maps_mut() {
            let w = m.weight.len();
            m.weight.copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            let b = m.bias.len();
            m.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    /// Per-scalar flags, true for parameters inside the expert branch.
    pub fn adapter_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for (name, m) in self.maps() {
            let adapter = name.starts_with("expert") || name.starts_with("router");
            out.extend(std::iter::repeat(adapter).take(m.param_count()));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.maps_mut().into_iter().for_each(AffineMap::zero_grad);
    }

    pub fn grads_are_zero(&self) -> bool {
        self.maps().iter().all(|(_, m)| m.grad_is_zero())
    }

    pub fn same_structure(&self, other: &Params) -> bool {
        let a = self.maps();
        let b = other.maps();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ma), (nb, mb))| {
                na == nb && ma.in_dim() == mb.in_dim() && ma.out_dim() == mb.out_dim()
            })
    }

    pub fn is_finite(&self) -> bool {
        self.maps()
            .iter()
            .all(|(_, m)| m.weight.iter().chain(&m.bias).all(|v| v.is_finite()))
    }

    /// SHA-256 over the bit patterns of every parameter, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.flatten() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean distance between two parameter sets.
    pub fn distance(&self, other: &Params) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// How stochastic and discrete parts of the forward pass are resolved.
pub enum Mode<'a> {
    /// Inference: no dropout, fresh selections.
    Eval,
    /// Student training: dropout drawn from `rng`, fresh selections.
    Train(&'a mut Rng),
    /// Reuse dropout and selections recorded by an earlier pass.
    Replay(&'a Selection),
}

/// Discrete choices of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub moase: Option<MoaseSelection>,
    /// Multipliers applied to the pooled feature, one per `[B·D]` entry.
    pub dropout: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Tensor,
    tokens: Tensor,
    preact: Vec<f64>,
    moase: Option<MoaseCache>,
    dropout: Option<Vec<f64>>,
    head_input: Option<Vec<f64>>,
}

/// Logits `[B × C]`, pre-classifier features `[B × D]` and what the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    pub features: Tensor,
    cache: ForwardCache,
}

impl Forward {
    pub fn selection(&self) -> Selection {
        Selection {
            moase: self.cache.moase.as_ref().map(|c| c.selection.clone()),
            dropout: self.cache.dropout.clone(),
        }
    }

    pub fn moase_cache(&self) -> Option<&MoaseCache> {
        self.cache.moase.as_ref()
    }

    pub fn probabilities(&self) -> Result<Tensor> {
        let (b, c) = self.logits.dims2()?;
        let mut out = Vec::with_capacity(b * c);
        for row in self.logits.rows() {
            out.extend(softmax(row, 1.0)?);
        }
        Ok(Tensor::from_parts(vec![b, c], out))
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.rows().map(argmax).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the network on a `[B × input_dim]` batch.
pub fn forward(
    params: &Params,
    config: &BackboneConfig,
    x: &Tensor,
    mode: Mode<'_>,
) -> Result<Forward> {
    let (b, in_dim) = x.dims2()?;
    if in_dim != config.input_dim || params.embed.in_dim() != in_dim {
        return Err(shape(&[b, config.input_dim], x.shape()));
    }
    let (n, d) = (config.tokens, config.channels);
    if params.embed.out_dim() != n * d {
        return Err(domain("embedding width does not match tokens × channels"));
    }

    let mut tok = vec![0.0; b * n * d];
    for (xi, out) in x.rows().zip(tok.chunks_mut(n * d)) {
        params.embed.forward_into(xi, out);
    }
    let tokens = Tensor::from_parts(vec![b, n, d], tok);

    let mut preact = vec![0.0; b * n * d];
    for (t, u) in tokens.data().chunks(d).zip(preact.chunks_mut(d)) {
        params.block.forward_into(t, u);
    }

    let (replay, mut rng) = match mode {
        Mode::Eval => (None, None),
        Mode::Train(rng) => (None, Some(rng)),
        Mode::Replay(sel) => (Some(sel), None),
    };

    let moase = if config.use_moase {
        let out = moase_forward_with(
            &tokens,
            &params.experts,
            &params.heads,
            &config.gating,
            replay.and_then(|s| s.moase.as_ref()),
        )?;
        for (u, y) in preact.iter_mut().zip(out.output.data()) {
            *u += y;
        }
        Some(out.cache)
    } else {
        None
    };

    let dropout = match (replay, rng.as_deref_mut()) {
        (Some(sel), _) => sel.dropout.clone(),
        (None, Some(rng)) if config.dropout > 0.0 => {
            let keep = 1.0 - config.dropout;
            Some(
                (0..b * d)
                    .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                    .collect(),
            )
        }
        _ => None,
    };

    let mut features = vec![0.0; b * d];
    for bi in 0..b {
        let g = &mut features[bi * d..(bi + 1) * d];
        for t in 0..n {
            let base = (bi * n + t) * d;
            for c in 0..d {
                g[c] += tokens.data()[base + c] + gelu(preact[base + c]);
            }
        }
        g.iter_mut().for_each(|v| *v /= n as f64);
    }

    let head_input: Option<Vec<f64>> = dropout
        .as_ref()
        .map(|m| features.iter().zip(m).map(|(g, m)| g * m).collect());
    let classes = params.classifier.out_dim();
    let mut logits = vec![0.0; b * classes];
    for (g, z) in head_input
        .as_deref()
        .unwrap_or(&features)
        .chunks(d)
        .zip(logits.chunks_mut(classes))
    {
        params.classifier.forward_into(g, z);
    }
    let logits = Tensor::from_parts(vec![b, classes], logits);
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }

    Ok(Forward {
        logits,
        features: Tensor::from_parts(vec![b, d], features),
        cache: ForwardCache {
            input: x.clone(),
            tokens,
            preact,
            moase,
            dropout,
            head_input,
        },
    })
}

/// Accumulates `dL/dθ` for the gradient `dL/dlogits`.
pub fn backward(
    params: &mut Params,
    config: &BackboneConfig,
    fwd: &Forward,
    dlogits: &Tensor,
) -> Result<()> {
    if dlogits.shape() != fwd.logits.shape() {
        return Err(shape(fwd.logits.shape(), dlogits.shape()));
    }
    let (b, n, d) = fwd.cache.tokens.dims3()?;
    let classes = params.classifier.out_dim();

    let head_input = fwd
        .cache
        .head_input
        .as_deref()
        .unwrap_or(fwd.features.data());
    let mut dg = vec![0.0; b * d];
    for ((g, dz), dgi) in head_input
        .chunks(d)
        .zip(dlogits.data().chunks(classes))
        .zip(dg.chunks_mut(d))
    {
        params.classifier.backward_into(g, dz, dgi);
    }
    if let Some(m) = &fwd.cache.dropout {
        dg.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
    }

    let mut dtok = vec![0.0; b * n * d];
    let mut du = vec![0.0; b * n * d];
    for bi in 0..b {
        for t in 0..n {
            let base = (bi * n + t) * d;
            for c in 0..d {
                let dh = dg[bi * d + c] / n as f64;
                dtok[base + c] = dh;
                du[base + c] = dh * gelu_grad(fwd.cache.preact[base + c]);
            }
        }
    }

    let tokens = &fwd.cache.tokens;
    for ((t, u), dt) in tokens
        .data()
        .chunks(d)
        .zip(du.chunks(d))
        .zip(dtok.chunks_mut(d))
    {
        params.block.backward_into(t, u, dt);
    }

    if let Some(cache) = &fwd.cache.moase {
        let upstream = Tensor::from_parts(vec![b, n, d], du);
        let dx = moase_backward(
            tokens,
            &mut params.experts,
            &mut params.heads,
            cache,
            &upstream,
        )?;
        for (a, v) in dtok.iter_mut().zip(dx.data()) {
            *a += v;
        }
    }

    let mut scratch = vec![0.0; config.input_dim];
    for (x, dt) in fwd.cache.input.rows().zip(dtok.chunks(n * d)) {
        params.embed.backward_into(x, dt, &mut scratch);
    }
    Ok(())
}

/// Mean cross-entropy against hard labels and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(shape(&[b], &[labels.len()]));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for (row, &y) in logits.rows().zip(labels) {
        if y >= c {
            return Err(domain(format!("label {y} out of range for {c} classes")));
        }
        let lp = log_softmax(row, 1.0)?;
        loss -= lp[y];
        for (k, l) in lp.iter().enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            grad.push((l.exp() - target) / b as f64);
        }
    }
    Ok((loss / b as f64, Tensor::from_parts(vec![b, c], grad)))
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One descent step on the entries where `trainable` is true (or all).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], trainable: Option<&[bool]>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if trainable.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Descent step applied directly to a parameter set's accumulated grads.
    pub fn step_params(&mut self, params: &mut Params, trainable: Option<&[bool]>) -> Result<()> {
        let mut flat = params.flatten();
        let grads = params.flatten_grads();
        self.step(&mut flat, &grads, trainable);
        params.load_flat(&flat)
    }
}

/// Student, EMA teacher and the frozen source snapshot.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub config: BackboneConfig,
    pub student: Params,
    pub teacher: Params,
    source: Params,
    pub step: u64,
}

impl ModelPair {
    pub fn new(config: BackboneConfig, source: Params) -> Result<Self> {
        config.validate()?;
        let template = Params::init(&config, &mut Rng::new(0, 0))?;
        if !template.same_structure(&source) {
            return Err(domain("source parameters do not match the backbone config"));
        }
        Ok(Self {
            config,
            student: source.clone(),
            teacher: source.clone(),
            source,
            step: 0,
        })
    }

    pub fn source(&self) -> &Params {
        &self.source
    }
}

/// Fresh pair: student, teacher and source share one initialization.
pub fn build_model(config: &BackboneConfig, rng: &mut Rng) -> Result<ModelPair> {
    let params = Params::init(config, rng)?;
    ModelPair::new(config.clone(), params)
}

/// Resets each scalar of `student` to its `source` value with probability
/// `p`. Returns the number of restored scalars.
pub fn restore_stochastic(
    student: &mut Params,
    source: &Params,
    p: f64,
    rng: &mut Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(domain(format!(
            "restoration probability must lie in [0,1], got {p}"
        )));
    }
    if !student.same_structure(source) {
        return Err(domain("student and source structures differ"));
    }
    if p == 0.0 {
        return Ok(0);
    }
    let mut flat = student.flatten();
    let src = source.flatten();
    let mut restored = 0;
    for (v, s) in flat.iter_mut().zip(&src) {
        if rng.bernoulli(p) {
            *v = *s;
            restored += 1;
        }
    }
    student.load_flat(&flat)?;
    Ok(restored)
}

const CHECKPOINT_MAGIC: &str = "moase-checkpoint v1";

/// Writes a text checkpoint:
///
/// ```text
/// moase-checkpoint v1
/// config <backbone config as one-line JSON>
/// tensor <name> <dim>...
/// <values, space separated, shortest round-trip decimal>
/// ```
///
/// Every value round-trips bit-exactly.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    config: &BackboneConfig,
    params: &Params,
) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "config {}", serde_json::to_string(config)?)?;
    for (name, m) in params.maps() {
        for (suffix, dims, values) in [
            ("weight", vec![m.out_dim(), m.in_dim()], &m.weight),
            ("bias", vec![m.out_dim()], &m.bias),
        ] {
            let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
            writeln!(out, "tensor {name}.{suffix} {}", dims.join(" "))?;
            let vals: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", vals.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(BackboneConfig, Params)> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(Error::Checkpoint {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            }),
        }
    };
    let bad = |line: usize, message: String| Error::Checkpoint { line, message };

    let (ln, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(bad(ln, format!("unknown header `{magic}`")));
    }
    let (ln, cfg_line) = next("config")?;
    let json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| bad(ln, "missing config line".into()))?;
    let config: BackboneConfig = serde_json::from_str(json).map_err(|e| bad(ln, e.to_string()))?;
    let mut params = Params::init(&config, &mut Rng::new(0, 0))?;
    let names: Vec<String> = params.maps().into_iter().map(|(n, _)| n).collect();

    for (name, map) in names.iter().zip(params.maps_mut()) {
        for suffix in ["weight", "bias"] {
            let (ln, header) = next("tensor header")?;
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(bad(ln, format!("expected tensor header, got `{header}`")));
            }
            let want = format!("{name}.{suffix}");
            if parts.next() != Some(want.as_str()) {
                return Err(bad(ln, format!("expected tensor `{want}`")));
            }
            let dims: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| bad(ln, format!("bad extent `{p}`"))))
                .collect::<Result<_>>()?;
            let expected = if suffix == "weight" {
                vec![map.out_dim(), map.in_dim()]
            } else {
                vec![map.out_dim()]
            };
            if dims != expected {
                return Err(bad(
                    ln,
                    format!("tensor `{want}` has shape {dims:?}, expected {expected:?}"),
                ));
            }
            let (ln, body) = next("tensor values")?;
            let values: Vec<f64> = body
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(ln, format!("bad value `{v}`"))))
                .collect::<Result<_>>()?;
            let target = if suffix == "weight" {
                &mut map.weight
            } else {
                &mut map.bias
            };
            if values.len() != target.len() {
                return Err(bad(
                    ln,
                    format!(
                        "tensor `{want}` has {} values, expected {}",
                        values.len(),
                        target.len()
                    ),
                ));
            }
            target.copy_from_slice(&values);
        }
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &BackboneConfig, params: &Params) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, config, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(BackboneConfig, Params)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
