//! Synthetic continual-domain streams over a Gaussian class-blob task.
//!
//! Labels are generated alongside every batch but wrapped in
//! [`HiddenLabels`], which only an [`Evaluator`] can open.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Result};
use crate::policy::{param_augment, AugmentConfig};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    GaussNoise,
    Smooth,
    Contrast,
    Brightness,
    Occlude,
    Identity,
}

impl Corruption {
    /// Index into the augmenter's strength vector.
    fn family(self) -> Option<usize> {
        match self {
            Self::GaussNoise => Some(0),
            Self::Smooth => Some(1),
            Self::Contrast => Some(2),
            Self::Brightness => Some(3),
            Self::Occlude => Some(4),
            Self::Identity => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub corruption: Corruption,
    pub severity: u8,
    /// Number of batches.
    pub duration: usize,
}

impl DomainSpec {
    pub fn new(name: &str, corruption: Corruption, severity: u8, duration: usize) -> Self {
        Self {
            name: name.to_string(),
            corruption,
            severity,
            duration,
        }
    }

    /// Strength vector fed to the shared perturbation kernels. Strength grows
    /// linearly with severity, reaching the family's full scale at 5.
    /// Contrast corruptions reduce contrast.
    pub fn strengths(&self) -> [f64; 5] {
        let mut a = [0.0; 5];
        if let Some(j) = self.corruption.family() {
            let s = self.severity as f64 / 5.0;
            a[j] = if self.corruption == Corruption::Contrast {
                -s
            } else {
                s
            };
        }
        a
    }

    /// SHA-256 over the corruption family, strengths and kernel scales.
    pub fn params_hash(&self, augment: &AugmentConfig) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.corruption).as_bytes());
        for v in self
            .strengths()
            .iter()
            .chain(&augment.scales())
            .chain([&augment.clip])
        {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Class-blob classification task: `x = μ_y + σ·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobTask {
    pub classes: usize,
    pub input_dim: usize,
    /// Scale of the class means; zero makes every class identical.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
}

impl Default for BlobTask {
    fn default() -> Self {
        Self {
            classes: 4,
            input_dim: 16,
            separation: 4.0,
            spread: 1.0,
        }
    }
}

impl BlobTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config("task.classes", "need at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(config("task.input_dim", "must be at least 1"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(config("task.separation", "must be finite and non-negative"));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(config("task.spread", "must be positive"));
        }
        Ok(())
    }

    /// Class means, fixed by `seed`.
    pub fn means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed, 0x6d65616e);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.input_dim).map(|_| rng.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| self.separation * x / n).collect()
            })
            .collect()
    }

    /// A clean labeled sample of `n` points.
    pub fn sample(&self, means: &[Vec<f64>], n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(n * self.input_dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.below(self.classes);
            labels.push(y);
            data.extend(means[y].iter().map(|m| m + self.spread * rng.normal()));
        }
        (Tensor::from_parts(vec![n, self.input_dim], data), labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub task: BlobTask,
    pub domains: Vec<DomainSpec>,
    pub rounds: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Kernel scales shared with the augmenter.
    pub kernels: AugmentConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            task: BlobTask::default(),
            domains: default_domains(50),
            rounds: 1,
            batch_size: 40,
            seed: 1,
            kernels: AugmentConfig::default(),
        }
    }
}

/// Six domains at severity 5, clean data in third position.
pub fn default_domains(duration: usize) -> Vec<DomainSpec> {
    vec![
        DomainSpec::new("gauss-noise", Corruption::GaussNoise, 5, duration),
        DomainSpec::new("brightness", Corruption::Brightness, 5, duration),
        DomainSpec::new("identity", Corruption::Identity, 1, duration),
        DomainSpec::new("contrast", Corruption::Contrast, 5, duration),
        DomainSpec::new("smooth", Corruption::Smooth, 5, duration),
        DomainSpec::new("occlude", Corruption::Occlude, 5, duration),
    ]
}

/// One clean domain.
pub fn identity_domains(duration: usize) -> Vec<DomainSpec> {
    vec![DomainSpec::new(
        "identity",
        Corruption::Identity,
        1,
        duration,
    )]
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| match e {
            crate::Error::Config { path, message } => config(format!("stream.{path}"), message),
            other => other,
        })?;
        if self.domains.is_empty() {
            return Err(config("stream.domains", "sequence must not be empty"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if !(1..=5).contains(&d.severity) {
                return Err(config(
                    format!("stream.domains[{i}].severity"),
                    "must lie in 1..=5",
                ));
            }
            if d.duration == 0 {
                return Err(config(
                    format!("stream.domains[{i}].duration"),
                    "must be at least 1",
                ));
            }
        }
        if self.rounds == 0 {
            return Err(config("stream.rounds", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config("stream.batch_size", "must be at least 1"));
        }
        self.kernels
            .validate()
            .map_err(|e| config("stream.kernels", e.to_string()))
    }

    pub fn total_batches(&self) -> usize {
        self.rounds * self.domains.iter().map(|d| d.duration).sum::<usize>()
    }
}

/// Labels the adaptation side cannot read.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels(Vec<usize>);

/// The only way to read [`HiddenLabels`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Evaluator;

impl Evaluator {
    pub fn reveal<'a>(&self, labels: &'a HiddenLabels) -> &'a [usize] {
        &labels.0
    }

    /// Fraction of wrong predictions.
    pub fn error(&self, labels: &HiddenLabels, predictions: &[usize]) -> f64 {
        let wrong = labels
            .0
            .iter()
            .zip(predictions)
            .filter(|(y, p)| y != p)
            .count();
        wrong as f64 / labels.0.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub index: usize,
    pub round: usize,
    /// Position in the domain sequence.
    pub domain: usize,
    pub x: Tensor,
    pub labels: HiddenLabels,
}

/// Lazily generated batches in stream order.
#[derive(Debug, Clone)]
pub struct Stream {
    config: StreamConfig,
    means: Vec<Vec<f64>>,
    schedule: Vec<(usize, usize)>,
    next: usize,
}

impl Stream {
    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    /// Batch `index`, independent of iteration state.
    pub fn batch(&self, index: usize) -> Result<StreamBatch> {
        let (round, domain) = self.schedule[index];
        let spec = &self.config.domains[domain];
        let mut data_rng = Rng::new(self.config.seed, 0x1000_0000 + index as u64);
        let (clean, labels) =
            self.config
                .task
                .sample(&self.means, self.config.batch_size, &mut data_rng);
        let mut noise_rng = Rng::new(self.config.seed, 0x2000_0000 + index as u64);
        let x = param_augment(
            &clean,
            &spec.strengths(),
            &self.config.kernels,
            &mut noise_rng,
        )?;
        Ok(StreamBatch {
            index,
            round,
            domain,
            x,
            labels: HiddenLabels(labels),
        })
    }
}

impl Iterator for Stream {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        if self.next >= self.schedule.len() {
            return None;
        }
        let b = self.batch(self.next).ok();
        self.next += 1;
        b
    }
}

pub fn generate_stream(config: &StreamConfig) -> Result<Stream> {
    config.validate()?;
    let mut schedule = Vec::with_capacity(config.total_batches());
    for round in 0..config.rounds {
        for (d, spec) in config.domains.iter().enumerate() {
            schedule.extend(std::iter::repeat((round, d)).take(spec.duration));
        }
    }
    Ok(Stream {
        means: config.task.means(config.seed),
        config: config.clone(),
        schedule,
        next: 0,
    })
}
