//! Run configuration, source pretraining and evaluate-then-adapt episodes.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::daopd::{Adapter, DaopdConfig, ViewSource};
use crate::diagnostics::{cluster_spread, histogram_1d, js_divergence, FeatureBank, Projection};
use crate::error::{config, Error, Result};
use crate::model::{
    backward, build_model, cross_entropy, forward, Adam, BackboneConfig, Mode, ModelPair,
};
use crate::policy::{AugmentConfig, GaussianPolicy, PolicyConfig, FAMILIES};
use crate::stream::{generate_stream, BlobTask, DomainSpec, Evaluator, StreamConfig};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// No updates.
    SourceFrozen,
    /// Consistency loss only.
    MeanTeacherOnly,
    /// Distillation on views from a fixed augmentation pipeline.
    Moase,
    /// Distillation on views from the learned policy.
    #[serde(rename = "moase++")]
    MoasePlusPlus,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 4] = [
        AdaptMode::SourceFrozen,
        AdaptMode::MeanTeacherOnly,
        AdaptMode::Moase,
        AdaptMode::MoasePlusPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SourceFrozen => "source-frozen",
            Self::MeanTeacherOnly => "mean-teacher-only",
            Self::Moase => "moase",
            Self::MoasePlusPlus => "moase++",
        }
    }
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config("mode", format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub min_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub validation_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            min_steps: 300,
            batch_size: 64,
            lr: 5e-3,
            target_accuracy: 0.95,
            validation_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub bins: usize,
    /// Features kept per (domain, class).
    pub bank_capacity: usize,
    /// Clean source samples re-featurized for the reference histogram.
    pub probe_size: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            bank_capacity: 64,
            probe_size: 256,
        }
    }
}

/// A complete run description; the JSON config file deserializes into this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: AdaptMode,
    pub model: BackboneConfig,
    pub stream: StreamConfig,
    pub daopd: DaopdConfig,
    pub policy: PolicyConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: AdaptMode::MoasePlusPlus,
            model: BackboneConfig::default(),
            stream: StreamConfig::default(),
            daopd: DaopdConfig {
                lr: 1e-3,
                ..DaopdConfig::default()
            },
            policy: PolicyConfig::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| config(json_path(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            config(
                path.display().to_string(),
                format!("cannot read config: {e}"),
            )
        })?;
        Self::from_json(&text)
    }

    /// Sets the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stream.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.validate()?;
        self.daopd.validate()?;
        self.policy.validate()?;
        self.augment.validate()?;
        if self.model.input_dim != self.stream.task.input_dim {
            return Err(config(
                "model.input_dim",
                "must equal stream.task.input_dim",
            ));
        }
        if self.model.classes != self.stream.task.classes {
            return Err(config("model.classes", "must equal stream.task.classes"));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || p.validation_size == 0 || p.max_steps == 0 {
            return Err(config(
                "pretrain",
                "batch_size, validation_size and max_steps must be positive",
            ));
        }
        if !(p.lr > 0.0) {
            return Err(config("pretrain.lr", "must be positive"));
        }
        let d = &self.diagnostics;
        if d.bins < 2 || d.bank_capacity == 0 || d.probe_size == 0 {
            return Err(config(
                "diagnostics",
                "bins ≥ 2, bank_capacity ≥ 1 and probe_size ≥ 1 required",
            ));
        }
        Ok(())
    }
}

fn json_path(e: &serde_json::Error) -> String {
    // serde reports the field inside the message; keep the position as the path
    format!("line {} column {}", e.line(), e.column())
}

/// Clean held-out data drawn from a stream independent of training.
pub fn source_split(task: &BlobTask, seed: u64, n: usize, stream: u64) -> (Tensor, Vec<usize>) {
    let means = task.means(seed);
    task.sample(&means, n, &mut Rng::new(seed, stream))
}

/// RNG stream of the clean validation split.
pub const VALIDATION_STREAM: u64 = 0x7661_6c00;
/// RNG stream of the clean probe set used by the divergence diagnostics.
pub const PROBE_STREAM: u64 = 0x7072_6f62;

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub pair: ModelPair,
    pub accuracy: f64,
    pub reached_target: bool,
    pub steps: usize,
}

pub fn accuracy(
    pair_params: &crate::model::Params,
    cfg: &BackboneConfig,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let f = forward(pair_params, cfg, x, Mode::Eval)?;
    let correct = f
        .predictions()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Supervised training of the plain backbone on clean data. Expert adapters
/// stay at their zero initialization.
pub fn pretrain_source(run: &RunConfig) -> Result<Pretrained> {
    run.validate()?;
    let task = &run.stream.task;
    let mut rng = Rng::new(run.seed, 0x7072_6574);
    let mut pair = build_model(&run.model, &mut rng)?;
    let plain = BackboneConfig {
        use_moase: false,
        ..run.model.clone()
    };
    let means = task.means(run.seed);
    let (vx, vy) = source_split(
        task,
        run.seed,
        run.pretrain.validation_size,
        VALIDATION_STREAM,
    );
    let mut params = pair.student.clone();
    let mut adam = Adam::new(params.param_count(), run.pretrain.lr, 0.9, 0.99);
    let mut data_rng = Rng::new(run.seed, 0x7472_6169);
    let mut steps = 0;
    while steps < run.pretrain.max_steps {
        let (x, y) = task.sample(&means, run.pretrain.batch_size, &mut data_rng);
        let fwd = forward(&params, &plain, &x, Mode::Train(&mut rng))?;
        let (loss, grad) = cross_entropy(&fwd.logits, &y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining loss diverged at step {steps}"
            )));
        }
        params.zero_grad();
        backward(&mut params, &plain, &fwd, &grad)?;
        adam.step_params(&mut params, None)?;
        params.zero_grad();
        steps += 1;
        if steps >= run.pretrain.min_steps && steps % 50 == 0 {
            if accuracy(&params, &plain, &vx, &vy)? >= run.pretrain.target_accuracy {
                break;
            }
        }
    }
    let acc = accuracy(&params, &run.model, &vx, &vy)?;
    pair = ModelPair::new(pair.config.clone(), params)?;
    Ok(Pretrained {
        pair,
        accuracy: acc,
        reached_target: acc >= run.pretrain.target_accuracy,
        steps,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub round: usize,
    pub domain: String,
    pub domain_index: usize,
    pub error: f64,
    pub cons_loss: f64,
    pub daopd_loss: f64,
    pub reward: Option<f64>,
    pub baseline: f64,
    pub routing: Vec<f64>,
    pub strengths: Vec<f64>,
    pub js: f64,
    pub ic: Vec<Option<f64>>,
    pub wall_ms: f64,
}

/// Per-(round, domain) aggregate, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub round: usize,
    pub domain: String,
    pub batches: usize,
    pub mean_error: f64,
    pub mean_js: f64,
    pub mean_ic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub mode: AdaptMode,
    pub seed: u64,
    pub source_accuracy: f64,
    pub records: Vec<StepRecord>,
    pub summary: Vec<DomainSummary>,
    pub mean_error: f64,
    pub corruption_hashes: Vec<Vec<String>>,
}

pub const CSV_HEADER: &str = "round,domain,batches,mean_error,mean_js,mean_ic";

impl EpisodeMetrics {
    /// Same metrics with wall-clock timings zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
        m
    }

    /// Records of the final domain of the final round.
    pub fn last_domain(&self) -> &[StepRecord] {
        let Some(last) = self.records.last() else {
            return &[];
        };
        let start = self
            .records
            .iter()
            .rposition(|r| r.round != last.round || r.domain_index != last.domain_index)
            .map_or(0, |i| i + 1);
        &self.records[start..]
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for s in &self.summary {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                s.round, s.domain, s.batches, s.mean_error, s.mean_js, s.mean_ic
            )?;
        }
        let n = self.records.len();
        let mean = |f: &dyn Fn(&StepRecord) -> f64| {
            self.records.iter().map(f).sum::<f64>() / n.max(1) as f64
        };
        writeln!(
            out,
            "all,overall,{n},{:.6},{:.6},{:.6}",
            self.mean_error,
            mean(&|r| r.js),
            mean(&|r| mean_ic(&r.ic))
        )?;
        Ok(())
    }

    /// Writes `metrics.jsonl` and `summary.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let jsonl = std::fs::File::create(dir.join("metrics.jsonl"))?;
        self.write_jsonl(std::io::BufWriter::new(jsonl))?;
        let csv = std::fs::File::create(dir.join("summary.csv"))?;
        self.write_csv(std::io::BufWriter::new(csv))
    }
}

/// Mean over the classes that have entries.
pub fn mean_ic(ic: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = ic.iter().flatten().copied().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Builds the adapter for `mode` around a copy of the pretrained pair.
pub fn make_adapter(run: &RunConfig, pair: ModelPair) -> Result<Adapter> {
    let mut daopd = run.daopd.clone();
    let views = match run.mode {
        AdaptMode::MoasePlusPlus => {
            ViewSource::Policy(GaussianPolicy::new(FAMILIES.len(), 2, &run.policy)?)
        }
        AdaptMode::Moase => ViewSource::Fixed,
        AdaptMode::MeanTeacherOnly | AdaptMode::SourceFrozen => {
            daopd.opd_weight = 0.0;
            ViewSource::Fixed
        }
    };
    Adapter::new(pair, daopd, run.augment.clone(), views)
}

/// Runs the evaluate-then-adapt loop over the whole stream.
pub fn run_episode(run: &RunConfig, source: &Pretrained) -> Result<EpisodeMetrics> {
    run.validate()?;
    let stream = generate_stream(&run.stream)?;
    let mut adapter = make_adapter(run, source.pair.clone())?;
    let mut rng = Rng::new(run.seed, 0x6164_6170);
    let eval = Evaluator;
    let classes = run.model.classes;
    let diag = &run.diagnostics;
    let (probe, _) = source_split(&run.stream.task, run.seed, diag.probe_size, PROBE_STREAM);
    let mut bank = FeatureBank::new(diag.bank_capacity)?;
    let mut records = Vec::with_capacity(stream.len());
    let domains: Vec<DomainSpec> = run.stream.domains.clone();

    for batch in stream {
        let started = Instant::now();
        let spec = &domains[batch.domain];
        let (predictions, features, outcome) = if run.mode == AdaptMode::SourceFrozen {
            let f = adapter.predict(&batch.x)?;
            let routing = f
                .moase_cache()
                .map(|c| c.routing.mean_per_expert())
                .unwrap_or_default();
            (
                f.predictions(),
                f.features.clone(),
                (0.0, 0.0, None, 0.0, routing, vec![0.0; FAMILIES.len()]),
            )
        } else {
            let o = adapter.step(&batch.x, &mut rng)?;
            let extra = (
                o.cons_loss,
                o.daopd_loss,
                o.reward,
                o.baseline,
                o.routing,
                o.strengths,
            );
            (o.predictions, o.features, extra)
        };
        let error = eval.error(&batch.labels, &predictions);
        let key = batch.round * domains.len() + batch.domain;
        bank.push_batch(key, eval.reveal(&batch.labels), &features)?;

        // reference distribution: clean probe set under the current student
        let probe_feats = adapter.predict(&probe)?.features;
        let refs: Vec<&[f64]> = probe_feats.rows().collect();
        let projection = Projection::fit(&refs)?;
        let src_values: Vec<f64> = refs.iter().map(|f| projection.apply(f)).collect();
        let src_hist = histogram_1d(&src_values, diag.bins, projection.lo, projection.hi)?;
        let tgt_values: Vec<f64> = bank
            .domain_features(key)
            .iter()
            .map(|f| projection.apply(f))
            .collect();
        let tgt_hist = histogram_1d(&tgt_values, diag.bins, projection.lo, projection.hi)?;
        let js = js_divergence(&src_hist, &tgt_hist)?;
        let window = bank.restrict(key);
        let ic = (0..classes)
            .map(|c| {
                let f = window.class_features(c);
                if f.is_empty() {
                    None
                } else {
                    cluster_spread(&f).ok()
                }
            })
            .collect();

        let (cons_loss, daopd_loss, reward, baseline, routing, strengths) = outcome;
        records.push(StepRecord {
            step: batch.index as u64,
            round: batch.round,
            domain: spec.name.clone(),
            domain_index: batch.domain,
            error,
            cons_loss,
            daopd_loss,
            reward,
            baseline,
            routing,
            strengths,
            js,
            ic,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let summary = summarize(&records);
    let mean_error = records.iter().map(|r| r.error).sum::<f64>() / records.len().max(1) as f64;
    let corruption_hashes = (0..run.stream.rounds)
        .map(|_| {
            domains
                .iter()
                .map(|d| d.params_hash(&run.stream.kernels))
                .collect()
        })
        .collect();
    Ok(EpisodeMetrics {
        mode: run.mode,
        seed: run.seed,
        source_accuracy: source.accuracy,
        records,
        summary,
        mean_error,
        corruption_hashes,
    })
}

fn summarize(records: &[StepRecord]) -> Vec<DomainSummary> {
    let mut out: Vec<DomainSummary> = Vec::new();
    let mut counts: Vec<(f64, f64, f64)> = Vec::new();
    for r in records {
        let same = out.last().is_some_and(|s| {
            s.round == r.round && s.domain == r.domain && counts.len() == out.len()
        });
        if !same {
            out.push(DomainSummary {
                round: r.round,
                domain: r.domain.clone(),
                batches: 0,
                mean_error: 0.0,
                mean_js: 0.0,
                mean_ic: 0.0,
            });
            counts.push((0.0, 0.0, 0.0));
        }
        let s = out.last_mut().expect("pushed above");
        let c = counts.last_mut().expect("pushed above");
        s.batches += 1;
        c.0 += r.error;
        c.1 += r.js;
        c.2 += mean_ic(&r.ic);
    }
    for (s, c) in out.iter_mut().zip(counts) {
        let n = s.batches as f64;
        s.mean_error = c.0 / n;
        s.mean_js = c.1 / n;
        s.mean_ic = c.2 / n;
    }
    out
}

/// Sets one DA-OPD hyperparameter by name.
pub fn set_daopd_param(cfg: &mut DaopdConfig, name: &str, value: f64) -> Result<()> {
    match name {
        "ema_alpha" => cfg.ema_alpha = value,
        "views" => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(config("daopd.views", "must be a positive integer"));
            }
            cfg.views = value as usize;
        }
        "temperature" => cfg.temperature = value,
        "opd_weight" => cfg.opd_weight = value,
        "strength_penalty" => cfg.strength_penalty = value,
        "policy_beta" => cfg.policy_beta = value,
        "restore_prob" => cfg.restore_prob = value,
        "lr" => cfg.lr = value,
        other => {
            return Err(config(
                "sweep.param",
                format!("unknown parameter `{other}`"),
            ))
        }
    }
    cfg.validate()
}
