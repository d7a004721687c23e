//! EMA-anchored on-policy distillation: losses, teacher update, reward, and
//! the per-batch adaptation step.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, shape, Error, Result};
use crate::model::{backward, forward, restore_stochastic, Adam, Forward, Mode, ModelPair};
use crate::policy::{
    fixed_strengths, param_augment, policy_objective, state_stats, AugmentConfig, GaussianPolicy,
    PolicyConfig, PolicyState, StrengthVector, FAMILIES,
};
use crate::tensor::{kl_divergence, log_softmax, softmax, Rng, Tensor};

/// Hyperparameter presets for the four benchmark families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Cifar10,
    Cifar100,
    Imagenet,
    Acdc,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "imagenet" => Ok(Self::Imagenet),
            "acdc" => Ok(Self::Acdc),
            other => Err(config("daopd.preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// Which student parameters the optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptScope {
    #[default]
    All,
    /// Experts and routing heads only.
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaopdConfig {
    pub ema_alpha: f64,
    pub views: usize,
    pub temperature: f64,
    pub opd_weight: f64,
    pub strength_penalty: f64,
    pub policy_beta: f64,
    pub baseline_momentum: f64,
    pub restore_prob: f64,
    /// Student learning rate.
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adapt_scope: AdaptScope,
}

impl Default for DaopdConfig {
    fn default() -> Self {
        Self::preset(Preset::Cifar10)
    }
}

impl DaopdConfig {
    pub fn preset(preset: Preset) -> Self {
        let (ema_alpha, views, temperature, opd_weight) = match preset {
            Preset::Cifar10 => (0.999, 2, 1.0, 0.5),
            Preset::Cifar100 => (0.998, 1, 2.5, 0.1),
            Preset::Imagenet => (0.995, 1, 2.0, 0.3),
            Preset::Acdc => (0.999, 1, 1.5, 0.1),
        };
        Self {
            ema_alpha,
            views,
            temperature,
            opd_weight,
            strength_penalty: 0.01,
            policy_beta: 0.01,
            baseline_momentum: 0.9,
            restore_prob: 0.001,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adapt_scope: AdaptScope::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(config(format!("daopd.{field}"), msg))
            }
        };
        check(
            (0.0..1.0).contains(&self.ema_alpha),
            "ema_alpha",
            "must lie in [0, 1)",
        )?;
        check(self.views >= 1, "views", "must be at least 1")?;
        check(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature",
            "must be positive",
        )?;
        check(
            self.opd_weight >= 0.0 && self.opd_weight.is_finite(),
            "opd_weight",
            "must be non-negative",
        )?;
        check(
            self.strength_penalty >= 0.0 && self.strength_penalty.is_finite(),
            "strength_penalty",
            "must be non-negative",
        )?;
        check(
            self.policy_beta >= 0.0 && self.policy_beta.is_finite(),
            "policy_beta",
            "must be non-negative",
        )?;
        check(
            (0.0..1.0).contains(&self.baseline_momentum),
            "baseline_momentum",
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..=1.0).contains(&self.restore_prob),
            "restore_prob",
            "must lie in [0, 1]",
        )?;
        check(
            self.lr > 0.0 && self.lr.is_finite(),
            "lr",
            "must be positive",
        )?;
        check(
            (0.0..1.0).contains(&self.adam_beta1),
            "adam_beta1",
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.adam_beta2),
            "adam_beta2",
            "must lie in [0, 1)",
        )
    }
}

/// `θ^T ← α·θ^T + (1−α)·θ^S`.
pub fn ema_update(pair: &mut ModelPair, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(domain(format!(
            "EMA coefficient must lie in [0, 1), got {alpha}"
        )));
    }
    let s = pair.student.flatten();
    let mut t = pair.teacher.flatten();
    for (t, s) in t.iter_mut().zip(&s) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    pair.teacher.load_flat(&t)
}

/// A scalar loss with its gradient w.r.t. the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

/// Batch-mean `−⟨p_T, log p_θ⟩` at unit temperature. Teacher logits are
/// constants.
pub fn consistency_loss(student: &Tensor, teacher: &Tensor) -> Result<LossGrad> {
    if student.shape() != teacher.shape() {
        return Err(shape(teacher.shape(), student.shape()));
    }
    let (b, c) = student.dims2()?;
    if b == 0 {
        return Err(domain("empty batch"));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for (zs, zt) in student.rows().zip(teacher.rows()) {
        let ls = log_softmax(zs, 1.0)?;
        let pt = softmax(zt, 1.0)?;
        loss -= pt.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>();
        grad.extend(ls.iter().zip(&pt).map(|(l, p)| (l.exp() - p) / b as f64));
    }
    Ok(LossGrad {
        loss: loss / b as f64,
        grad: Tensor::from_parts(vec![b, c], grad),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaopdLoss {
    /// `(ω/V)·Σ_v KL_v`.
    pub loss: f64,
    /// Batch-mean reverse KL of each view.
    pub view_kl: Vec<f64>,
    /// Per-view gradients w.r.t. student logits, already multiplied by `T²`.
    pub grads: Vec<Tensor>,
}

/// Temperature-softened reverse KL `KL(p_θ ‖ p_T)` averaged over views and
/// batch, weighted by `ω`.
pub fn daopd_loss(
    student: &[Tensor],
    teacher: &[Tensor],
    temperature: f64,
    weight: f64,
) -> Result<DaopdLoss> {
    if student.is_empty() {
        return Err(domain("at least one view is required"));
    }
    if student.len() != teacher.len() {
        return Err(domain(format!(
            "{} student views but {} teacher views",
            student.len(),
            teacher.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(domain("temperature must be positive"));
    }
    let v = student.len() as f64;
    let mut view_kl = Vec::with_capacity(student.len());
    let mut grads = Vec::with_capacity(student.len());
    for (zs, zt) in student.iter().zip(teacher) {
        if zs.shape() != zt.shape() {
            return Err(shape(zt.shape(), zs.shape()));
        }
        let (b, c) = zs.dims2()?;
        if b == 0 {
            return Err(domain("empty batch"));
        }
        let scale = weight / v / b as f64 * temperature;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(b * c);
        for (rs, rt) in zs.rows().zip(zt.rows()) {
            let ls = log_softmax(rs, temperature)?;
            let lt = log_softmax(rt, temperature)?;
            let p: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
            let q: Vec<f64> = lt.iter().map(|l| l.exp()).collect();
            let kl = kl_divergence(&p, &q)?;
            total += kl;
            // d KL / d z_j = (1/T)·p_j·((log p_j − log q_j) − KL); times T²
            grad.extend((0..c).map(|j| scale * p[j] * ((ls[j] - lt[j]) - kl)));
        }
        view_kl.push(total / b as f64);
        grads.push(Tensor::from_parts(vec![b, c], grad));
    }
    Ok(DaopdLoss {
        loss: weight / v * view_kl.iter().sum::<f64>(),
        view_kl,
        grads,
    })
}

/// `R = −kl − λ‖a‖²`.
pub fn reward(view_kl: f64, a: &[f64], strength_penalty: f64) -> Result<f64> {
    if !(view_kl >= 0.0) {
        return Err(domain(format!(
            "view KL must be non-negative, got {view_kl}"
        )));
    }
    let r = -view_kl - strength_penalty * a.iter().map(|v| v * v).sum::<f64>();
    if !r.is_finite() {
        return Err(Error::Numeric("non-finite reward".into()));
    }
    Ok(r)
}

/// EMA of past rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBaseline {
    pub value: f64,
    pub momentum: f64,
}

impl RewardBaseline {
    pub fn new(momentum: f64) -> Self {
        Self {
            value: 0.0,
            momentum,
        }
    }

    pub fn update(&mut self, reward: f64) {
        self.value = self.momentum * self.value + (1.0 - self.momentum) * reward;
    }
}

/// Where the augmentation strengths of each step come from.
#[derive(Debug, Clone)]
pub enum ViewSource {
    /// Learned policy, updated every step.
    Policy(GaussianPolicy),
    /// Fixed mid-range strengths with random signs.
    Fixed,
}

/// Result of one evaluate-then-adapt step. `predictions` and `features` are
/// taken from the student before it is updated.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub predictions: Vec<usize>,
    pub features: Tensor,
    pub state: PolicyState,
    pub strengths: Vec<f64>,
    pub cons_loss: f64,
    pub daopd_loss: f64,
    pub reward: Option<f64>,
    pub baseline: f64,
    pub policy_objective: Option<f64>,
    pub routing: Vec<f64>,
    pub restored: usize,
    /// `(phase, student hash, teacher hash)` after each phase, when tracing.
    pub trace: Vec<(&'static str, String, String)>,
}

/// Owns everything one adaptation episode mutates.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub pair: ModelPair,
    pub config: DaopdConfig,
    pub augment: AugmentConfig,
    pub views: ViewSource,
    pub baseline: RewardBaseline,
    optimizer: Adam,
    trainable: Option<Vec<bool>>,
    /// Record parameter hashes after each phase.
    pub trace: bool,
}

impl Adapter {
    pub fn new(
        pair: ModelPair,
        config: DaopdConfig,
        augment: AugmentConfig,
        views: ViewSource,
    ) -> Result<Self> {
        config.validate()?;
        augment.validate()?;
        if let ViewSource::Policy(p) = &views {
            if p.dim() != FAMILIES.len() {
                return Err(domain(
                    "policy dimension must match the perturbation families",
                ));
            }
        }
        let n = pair.student.param_count();
        let optimizer = Adam::new(n, config.lr, config.adam_beta1, config.adam_beta2);
        let trainable = match config.adapt_scope {
            AdaptScope::All => None,
            AdaptScope::Adapters => Some(pair.student.adapter_mask()),
        };
        Ok(Self {
            baseline: RewardBaseline::new(config.baseline_momentum),
            pair,
            config,
            augment,
            views,
            optimizer,
            trainable,
            trace: false,
        })
    }

    /// Adapter with a freshly initialized policy.
    pub fn with_policy(
        pair: ModelPair,
        config: DaopdConfig,
        augment: AugmentConfig,
        policy: &PolicyConfig,
    ) -> Result<Self> {
        let p = GaussianPolicy::new(FAMILIES.len(), 2, policy)?;
        Self::new(pair, config, augment, ViewSource::Policy(p))
    }

    fn mark(&self, out: &mut Vec<(&'static str, String, String)>, phase: &'static str) {
        if self.trace {
            out.push((phase, self.pair.student.hash(), self.pair.teacher.hash()));
        }
    }

    /// Student inference on clean `x`, no update.
    pub fn predict(&self, x: &Tensor) -> Result<Forward> {
        forward(&self.pair.student, &self.pair.config, x, Mode::Eval)
    }

    /// One step: predict, then student → policy → teacher → restoration.
    pub fn step(&mut self, x: &Tensor, rng: &mut Rng) -> Result<StepOutcome> {
        let (b, _) = x.dims2()?;
        if b == 0 {
            return Err(domain("empty batch"));
        }
        let mcfg = self.pair.config.clone();
        let mut trace = Vec::new();
        self.mark(&mut trace, "start");

        let eval = self.predict(x)?;
        let routing = eval
            .moase_cache()
            .map(|c| c.routing.mean_per_expert())
            .unwrap_or_default();
        let state = state_stats(&eval.probabilities()?)?;

        // (1) strengths and views
        let use_views = self.config.opd_weight > 0.0;
        let sample: Option<StrengthVector> = match (&self.views, use_views) {
            (ViewSource::Policy(p), true) => Some(p.sample(&state.features(), rng)?),
            _ => None,
        };
        let strengths = match (&sample, use_views) {
            (Some(s), _) => s.a.clone(),
            (None, true) => fixed_strengths(rng),
            (None, false) => vec![0.0; FAMILIES.len()],
        };
        let views: Vec<Tensor> = if use_views {
            (0..self.config.views)
                .map(|_| param_augment(x, &strengths, &self.augment, rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        // (2) student update
        let teacher_clean = forward(&self.pair.teacher, &mcfg, x, Mode::Eval)?;
        let student_clean = forward(&self.pair.student, &mcfg, x, Mode::Train(rng))?;
        let cons = consistency_loss(&student_clean.logits, &teacher_clean.logits)?;

        let mut student_views = Vec::with_capacity(views.len());
        let mut teacher_logits = Vec::with_capacity(views.len());
        for v in &views {
            teacher_logits.push(forward(&self.pair.teacher, &mcfg, v, Mode::Eval)?.logits);
            student_views.push(forward(&self.pair.student, &mcfg, v, Mode::Train(rng))?);
        }
        let opd = if use_views {
            let logits: Vec<Tensor> = student_views.iter().map(|f| f.logits.clone()).collect();
            Some(daopd_loss(
                &logits,
                &teacher_logits,
                self.config.temperature,
                self.config.opd_weight,
            )?)
        } else {
            None
        };
        let opd_value = opd.as_ref().map_or(0.0, |o| o.loss);
        if !(cons.loss + opd_value).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: cons={} daopd={} student_finite={} teacher_finite={}",
                self.pair.step,
                cons.loss,
                opd_value,
                self.pair.student.is_finite(),
                self.pair.teacher.is_finite()
            )));
        }

        self.pair.student.zero_grad();
        backward(&mut self.pair.student, &mcfg, &student_clean, &cons.grad)?;
        if let Some(o) = &opd {
            for (f, g) in student_views.iter().zip(&o.grads) {
                backward(&mut self.pair.student, &mcfg, f, g)?;
            }
        }
        self.optimizer
            .step_params(&mut self.pair.student, self.trainable.as_deref())?;
        self.pair.student.zero_grad();
        if !self.pair.student.is_finite() {
            return Err(Error::Numeric(format!(
                "student parameters diverged at step {}",
                self.pair.step
            )));
        }
        self.mark(&mut trace, "student");

        // (3) policy
        let mut reward_value = None;
        let mut objective = None;
        if let (Some(o), Some(s)) = (&opd, &sample) {
            let kl = o.view_kl.iter().sum::<f64>() / o.view_kl.len() as f64;
            let r = reward(kl, &s.a, self.config.strength_penalty)?;
            let advantage = r - self.baseline.value;
            if let ViewSource::Policy(p) = &mut self.views {
                p.update(s, advantage, self.config.policy_beta);
            }
            objective = Some(policy_objective(
                s.log_prob,
                r,
                self.baseline.value,
                s.entropy,
                self.config.policy_beta,
            ));
            self.baseline.update(r);
            reward_value = Some(r);
        }
        self.mark(&mut trace, "policy");

        // (4) teacher
        ema_update(&mut self.pair, self.config.ema_alpha)?;
        self.mark(&mut trace, "teacher");

        // (5) restoration
        let source = self.pair.source().clone();
        let restored = restore_stochastic(
            &mut self.pair.student,
            &source,
            self.config.restore_prob,
            rng,
        )?;
        self.mark(&mut trace, "restore");

        let step = self.pair.step;
        self.pair.step += 1;
        Ok(StepOutcome {
            step,
            predictions: eval.predictions(),
            features: eval.features,
            state,
            strengths,
            cons_loss: cons.loss,
            daopd_loss: opd_value,
            reward: reward_value,
            baseline: self.baseline.value,
            policy_objective: objective,
            routing,
            restored,
            trace,
        })
    }
}
