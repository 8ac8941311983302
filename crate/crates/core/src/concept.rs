//! Group concept learning.
//!
//! A concept is a single embedding row in the text-encoder token space. It is
//! learned by injecting it at the placeholder position of a fixed prompt and
//! minimizing the denoising error of the frozen noise predictor over the group
//! images, with timesteps drawn from a three-interval resampling distribution
//! that oversamples the middle of the diffusion range.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{fit_to_backend, BackendDescriptor, DiffusionBackend, LatentTensor, TextEmbeddingSequence};
use crate::dataset::ImageGroup;
use crate::error::{Error, Result};
use crate::imaging::{write_atomic, RgbImage};

pub const CONCEPT_FORMAT_VERSION: u32 = 1;
pub const CONCEPT_EXTENSION: &str = ".concept.json";

/// Half-open integer interval `[start, end)`, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

impl From<[usize; 2]> for Interval {
    fn from([s, e]: [usize; 2]) -> Self {
        Self::new(s, e)
    }
}

impl From<Interval> for [usize; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

/// Piecewise-uniform timestep distribution over head, middle and tail intervals.
///
/// Interval masses are `1/(2(1+α))`, `α/(1+α)` and `1/(2(1+α))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplingConfig {
    pub t1: Interval,
    pub t2: Interval,
    pub t3: Interval,
    pub alpha: f64,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        Self {
            t1: Interval::new(0, 300),
            t2: Interval::new(300, 800),
            t3: Interval::new(800, 1000),
            alpha: 1.5,
        }
    }
}

impl ResamplingConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.t3.end
    }

    pub fn intervals(&self) -> [Interval; 3] {
        [self.t1, self.t2, self.t3]
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("resampling ratio must be positive, got {}", self.alpha)));
        }
        if self.intervals().iter().any(Interval::is_empty) {
            return Err(Error::Config("resampling intervals must be nonempty".into()));
        }
        if self.t1.start != 0 || self.t1.end != self.t2.start || self.t2.end != self.t3.start {
            return Err(Error::Config(format!(
                "resampling intervals {:?} are not contiguous from 0",
                self.intervals()
            )));
        }
        if self.t3.end != total_steps {
            return Err(Error::Config(format!(
                "resampling intervals end at {} but the schedule has {total_steps} steps",
                self.t3.end
            )));
        }
        Ok(())
    }

    pub fn interval_masses(&self) -> [f64; 3] {
        let a = self.alpha;
        let side = 1.0 / (2.0 * (1.0 + a));
        [side, a / (1.0 + a), side]
    }

    pub fn pmf(&self, t: usize) -> Result<f64> {
        let masses = self.interval_masses();
        self.intervals()
            .iter()
            .zip(masses)
            .find(|(iv, _)| iv.contains(t))
            .map(|(iv, m)| m / iv.len() as f64)
            .ok_or_else(|| Error::out_of_range("timestep", t, format!("[0, {})", self.total_steps())))
    }

    /// Draws an interval by mass, then a timestep uniformly inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let [m1, m2, _] = self.interval_masses();
        let iv = if u < m1 {
            self.t1
        } else if u < m1 + m2 {
            self.t2
        } else {
            self.t3
        };
        rng.random_range(iv.start..iv.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimestepSampling {
    /// Uniform over every step of the schedule.
    Uniform,
    Resampled(ResamplingConfig),
}

impl Default for TimestepSampling {
    fn default() -> Self {
        TimestepSampling::Resampled(ResamplingConfig::default())
    }
}

impl TimestepSampling {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        match self {
            TimestepSampling::Uniform if total_steps == 0 => Err(Error::Config("empty timestep range".into())),
            TimestepSampling::Uniform => Ok(()),
            TimestepSampling::Resampled(cfg) => cfg.validate(total_steps),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, total_steps: usize, rng: &mut R) -> usize {
        match self {
            TimestepSampling::Uniform => rng.random_range(0..total_steps),
            TimestepSampling::Resampled(cfg) => cfg.sample(rng),
        }
    }

    pub fn pmf(&self, t: usize, total_steps: usize) -> Result<f64> {
        match self {
            TimestepSampling::Uniform if t < total_steps => Ok(1.0 / total_steps as f64),
            TimestepSampling::Uniform => Err(Error::out_of_range("timestep", t, format!("[0, {total_steps})"))),
            TimestepSampling::Resampled(cfg) => cfg.pmf(t),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            TimestepSampling::Uniform => None,
            TimestepSampling::Resampled(cfg) => Some(cfg.alpha),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub prompt_template: String,
    /// Vocabulary token whose embedding initializes the concept.
    pub init_token: String,
    pub seed: u64,
    pub timesteps: TimestepSampling,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 4,
            max_steps: 2000,
            prompt_template: "a photo of S*".into(),
            init_token: "object".into(),
            seed: 0,
            timesteps: TimestepSampling::default(),
        }
    }
}

impl LearnConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.timesteps.validate(total_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptSource {
    Learned,
    Vocabulary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// `None` when timesteps were drawn uniformly.
    pub alpha: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub placeholder_token: String,
    pub source: ConceptSource,
    pub embedding: Vec<f64>,
    pub training_meta: Option<TrainingMeta>,
    pub backend: BackendDescriptor,
}

/// On-disk form of a concept (`*.concept.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub concept: Concept,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl Concept {
    pub fn validate(&self) -> Result<()> {
        if self.embedding.len() != self.backend.d_text {
            return Err(Error::Shape(format!(
                "concept embedding has {} entries, backend expects {}",
                self.embedding.len(),
                self.backend.d_text
            )));
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("concept embedding is not finite".into()));
        }
        Ok(())
    }

    pub fn to_file(&self) -> ConceptFile {
        ConceptFile {
            format_version: CONCEPT_FORMAT_VERSION,
            concept: self.clone(),
            cache_key: None,
            run_config: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(ConceptFile::load(path)?.concept)
    }
}

impl ConceptFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConceptFile = serde_json::from_str(text)?;
        if file.format_version != CONCEPT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported concept format_version {} (expected {CONCEPT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        file.concept.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }
}

/// Replaces the placeholder row of `text` with the concept embedding.
pub fn inject_concept(text: &TextEmbeddingSequence, concept: &Concept) -> Result<TextEmbeddingSequence> {
    inject_embedding(text, &concept.embedding)
}

pub fn inject_embedding(text: &TextEmbeddingSequence, embedding: &[f64]) -> Result<TextEmbeddingSequence> {
    let idx = text
        .placeholder_index()
        .ok_or_else(|| Error::Validation("prompt has no placeholder token to inject into".into()))?;
    text.with_row(idx, embedding)
}

/// Looks up a vocabulary token and wraps its embedding as a concept.
pub fn concept_from_token(backend: &dyn DiffusionBackend, token: &str) -> Result<Concept> {
    Ok(Concept {
        placeholder_token: crate::backend::PLACEHOLDER_TOKEN.into(),
        source: ConceptSource::Vocabulary,
        embedding: backend.token_embedding(token)?,
        training_meta: None,
        backend: backend.descriptor().clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    /// Gradient with respect to the concept embedding.
    pub gradient: Vec<f64>,
}

/// The frozen-model denoising objective for one prompt.
pub struct ConceptObjective<'a> {
    backend: &'a dyn DiffusionBackend,
    prompt: TextEmbeddingSequence,
    sampling: TimestepSampling,
}

impl<'a> ConceptObjective<'a> {
    pub fn new(backend: &'a dyn DiffusionBackend, prompt_template: &str, sampling: TimestepSampling) -> Result<Self> {
        sampling.validate(backend.schedule().total_steps())?;
        let prompt = backend.encode_prompt(prompt_template)?;
        if prompt.placeholder_index().is_none() {
            return Err(Error::Validation(format!(
                "prompt template `{prompt_template}` has no placeholder token"
            )));
        }
        Ok(Self {
            backend,
            prompt,
            sampling,
        })
    }

    /// Mean over the batch and over latent elements of `(ε_θ(z_t, t, Φ(y, c)) − ε)²`,
    /// with fresh `ε ~ N(0, I)` and `t ~ sampling` per latent.
    pub fn evaluate<R: Rng + ?Sized>(&self, embedding: &[f64], latents: &[&LatentTensor], rng: &mut R) -> Result<LossEval> {
        if latents.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let text = inject_embedding(&self.prompt, embedding)?;
        let total = self.backend.schedule().total_steps();
        let mut loss = 0.0;
        let mut gradient = vec![0.0; embedding.len()];
        for z0 in latents {
            let eps = LatentTensor::standard_normal(z0.shape(), rng);
            let t = self.sampling.sample(total, rng);
            let zt = self.backend.add_noise(z0, t, &eps)?;
            let pred = self.backend.predict_noise(&zt, t, &text)?;
            let scale = 1.0 / (latents.len() * pred.values().len()) as f64;
            let resid: Vec<f64> = pred.values().iter().zip(eps.values()).map(|(p, e)| p - e).collect();
            loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
            let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
            let (_, g) = self.backend.predict_noise_vjp(&zt, t, &text, &upstream)?;
            for (acc, gi) in gradient.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        Ok(LossEval { loss, gradient })
    }
}

/// Loss and embedding gradient of `concept` on a batch of images.
pub fn concept_loss<R: Rng + ?Sized>(
    backend: &dyn DiffusionBackend,
    concept: &Concept,
    images: &[RgbImage],
    rng: &mut R,
    cfg: &LearnConfig,
) -> Result<LossEval> {
    let objective = ConceptObjective::new(backend, &cfg.prompt_template, cfg.timesteps.clone())?;
    let latents = images
        .iter()
        .map(|img| backend.encode_image(&fit_to_backend(backend, img)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LatentTensor> = latents.iter().collect();
    objective.evaluate(&concept.embedding, &refs, rng)
}

/// Adaptive-moment gradient descent with constant step size.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub concept: Concept,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Batch loss at the returned embedding.
    pub final_loss: f64,
}

impl LearnOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(self.final_loss)
    }
}

/// Learns the group concept starting from `cfg.init_token`'s embedding.
pub fn learn_concept(backend: &dyn DiffusionBackend, group: &ImageGroup, cfg: &LearnConfig) -> Result<LearnOutcome> {
    if group.is_empty() {
        return Err(Error::Validation(format!("group `{}` is empty", group.name)));
    }
    cfg.validate(backend.schedule().total_steps())?;
    let objective = ConceptObjective::new(backend, &cfg.prompt_template, cfg.timesteps.clone())?;
    let latents = group
        .images
        .iter()
        .map(|gi| {
            backend
                .encode_image(&fit_to_backend(backend, &gi.image))
                .map_err(|e| Error::InImage {
                    id: gi.id.clone(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut embedding = backend.token_embedding(&cfg.init_token)?;
    let mut adam = Adam::new(cfg.learning_rate, embedding.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw_batch = |rng: &mut ChaCha8Rng| -> Vec<&LatentTensor> {
        (0..cfg.batch_size)
            .map(|_| &latents[rng.random_range(0..latents.len())])
            .collect()
    };

    let mut losses = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let batch = draw_batch(&mut rng);
        let eval = objective.evaluate(&embedding, &batch, &mut rng)?;
        if !eval.loss.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
            let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {} with embedding norm {norm}", eval.loss),
            });
        }
        losses.push(eval.loss);
        adam.step(&mut embedding, &eval.gradient);
        if step % 500 == 0 {
            log::debug!("group {} step {step}: loss {:.6e}", group.name, eval.loss);
        }
    }
    let batch = draw_batch(&mut rng);
    let final_loss = objective.evaluate(&embedding, &batch, &mut rng)?.loss;

    let concept = Concept {
        placeholder_token: crate::backend::PLACEHOLDER_TOKEN.into(),
        source: ConceptSource::Learned,
        embedding,
        training_meta: Some(TrainingMeta {
            steps: cfg.max_steps,
            lr: cfg.learning_rate,
            batch: cfg.batch_size,
            alpha: cfg.timesteps.alpha(),
            seed: cfg.seed,
        }),
        backend: backend.descriptor().clone(),
    };
    concept.validate()?;
    Ok(LearnOutcome {
        concept,
        losses,
        final_loss,
    })
}
