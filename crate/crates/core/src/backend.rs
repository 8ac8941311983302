//! Latent text-to-image diffusion backends.
//!
//! [`DiffusionBackend`] is the narrow surface the rest of the crate needs:
//! image autoencoder, prompt encoder, noise predictor (with a vector-Jacobian
//! product for the placeholder row), forward noising, vocabulary lookup and
//! cross-attention capture.
//!
//! [`ToyBackend`] is an analytic stand-in whose noise predictor is
//! `eps_true + A·(e − e*)`, where `e` is the placeholder row of the prompt
//! embedding. Its denoising objective is a convex quadratic in `e` with the
//! unique minimizer `e*`, so concept learning can be checked exactly.

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, check_rgb, resize_rgb, RgbImage};

pub const PLACEHOLDER_TOKEN: &str = "S*";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Toy,
    LatentDiffusionAdapter,
}

/// `(channels, height, width)`; serialized as a 3-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 3]> for LatentShape {
    fn from([c, h, w]: [usize; 3]) -> Self {
        Self::new(c, h, w)
    }
}

impl From<LatentShape> for [usize; 3] {
    fn from(s: LatentShape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}×{}×{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub model_id: String,
    pub latent_shape: LatentShape,
    pub d_text: usize,
    pub total_steps: usize,
}

impl BackendDescriptor {
    /// Whether a concept produced under `other` can be used with this backend.
    pub fn is_compatible(&self, other: &BackendDescriptor) -> bool {
        self.kind == other.kind && self.model_id == other.model_id && self.d_text == other.d_text
    }
}

/// Cumulative signal level `ᾱ_t` of the forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_BETA_START: f64 = 0.00085;
    pub const DEFAULT_BETA_END: f64 = 0.012;

    /// `β_t` linear in `√β` between the endpoints, `ᾱ_t = Π_{s≤t} (1 − β_s)`.
    pub fn scaled_linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_end < beta_start {
            return Err(Error::Config(format!(
                "invalid beta endpoints {beta_start}..{beta_end}"
            )));
        }
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let denom = (total_steps.max(2) - 1) as f64;
        let mut acc = 1.0;
        let alpha_bar = (0..total_steps)
            .map(|t| {
                let beta = (s + (e - s) * t as f64 / denom).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("empty noise schedule".into()));
        }
        if let Some(v) = alpha_bar.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::Config(format!("alpha_bar value {v} outside (0, 1]")));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("alpha_bar must be nonincreasing in t".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::out_of_range("timestep", t, format!("[0, {})", self.total_steps())))
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(Self::DEFAULT_STEPS, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// `√ᾱ · z0 + √(1 − ᾱ) · eps`, elementwise.
pub fn q_sample(z0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

#[derive(Clone, Debug)]
pub struct LatentTensor {
    shape: LatentShape,
    values: Vec<f64>,
    /// The noise this latent was formed with, when it came out of `add_noise`.
    noise_record: Option<Arc<[f64]>>,
}

impl PartialEq for LatentTensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl LatentTensor {
    pub fn new(shape: LatentShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "latent of shape {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent contains non-finite values".into()));
        }
        Ok(Self {
            shape,
            values,
            noise_record: None,
        })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
            noise_record: None,
        }
    }

    /// Standard-normal latent drawn from `rng`.
    pub fn standard_normal<R: rand::Rng + ?Sized>(shape: LatentShape, rng: &mut R) -> Self {
        let values = (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            shape,
            values,
            noise_record: None,
        }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn noise_record(&self) -> Option<&[f64]> {
        self.noise_record.as_deref()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Output of the prompt encoder: one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSequence {
    rows: Vec<Vec<f64>>,
    token_ids: Vec<u32>,
    placeholder_index: Option<usize>,
}

impl TextEmbeddingSequence {
    pub fn new(rows: Vec<Vec<f64>>, token_ids: Vec<u32>, placeholder_index: Option<usize>) -> Result<Self> {
        if rows.len() != token_ids.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows for {} tokens",
                rows.len(),
                token_ids.len()
            )));
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::Shape("embedding rows have differing widths".into()));
            }
        }
        if let Some(i) = placeholder_index {
            if i >= rows.len() {
                return Err(Error::out_of_range("placeholder index", i, format!("[0, {})", rows.len())));
            }
        }
        Ok(Self {
            rows,
            token_ids,
            placeholder_index,
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn placeholder_index(&self) -> Option<usize> {
        self.placeholder_index
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn placeholder_row(&self) -> Option<&[f64]> {
        self.placeholder_index.map(|i| self.rows[i].as_slice())
    }

    /// Copy with row `index` replaced.
    pub fn with_row(&self, index: usize, row: &[f64]) -> Result<Self> {
        if index >= self.rows.len() {
            return Err(Error::out_of_range("row index", index, format!("[0, {})", self.rows.len())));
        }
        if row.len() != self.width() {
            return Err(Error::Shape(format!(
                "replacement row has width {}, sequence has {}",
                row.len(),
                self.width()
            )));
        }
        let mut out = self.clone();
        out.rows[index] = row.to_vec();
        Ok(out)
    }
}

/// Which cross-attention layers to average, identified by their spatial resolution.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelection {
    #[default]
    CoarsestTwo,
    All,
    Resolutions(Vec<usize>),
}

impl LayerSelection {
    /// Picks from `available` (sorted ascending by resolution).
    pub fn select(&self, available: &[usize]) -> Result<Vec<usize>> {
        let picked: Vec<usize> = match self {
            LayerSelection::CoarsestTwo => available.iter().copied().take(2).collect(),
            LayerSelection::All => available.to_vec(),
            LayerSelection::Resolutions(list) => {
                if let Some(r) = list.iter().find(|r| !available.contains(r)) {
                    return Err(Error::Config(format!(
                        "no cross-attention layer at resolution {r}; available: {available:?}"
                    )));
                }
                list.clone()
            }
        };
        if picked.is_empty() {
            return Err(Error::Config("empty cross-attention layer selection".into()));
        }
        Ok(picked)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    /// Side length of the square output grid.
    pub resolution: usize,
    pub layers: LayerSelection,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            layers: LayerSelection::CoarsestTwo,
        }
    }
}

pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn schedule(&self) -> &NoiseSchedule;

    /// `(height, width)` of images accepted by [`encode_image`](Self::encode_image).
    fn input_size(&self) -> (usize, usize);

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor>;

    fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage>;

    /// Forward process `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
    fn add_noise(&self, z0: &LatentTensor, t: usize, eps: &LatentTensor) -> Result<LatentTensor> {
        if z0.shape() != eps.shape() {
            return Err(Error::Shape(format!("latent {} vs noise {}", z0.shape(), eps.shape())));
        }
        let alpha_bar = self.schedule().alpha_bar(t)?;
        let mut zt = LatentTensor::new(z0.shape(), q_sample(z0.values(), eps.values(), alpha_bar))?;
        zt.noise_record = Some(eps.values().into());
        Ok(zt)
    }

    fn encode_prompt(&self, prompt: &str) -> Result<TextEmbeddingSequence>;

    fn predict_noise(&self, z_t: &LatentTensor, t: usize, text: &TextEmbeddingSequence) -> Result<LatentTensor>;

    /// Noise prediction together with `Jᵀ·upstream`, where `J` is the Jacobian of
    /// the prediction with respect to the placeholder row of `text`.
    fn predict_noise_vjp(
        &self,
        z_t: &LatentTensor,
        t: usize,
        text: &TextEmbeddingSequence,
        upstream: &[f64],
    ) -> Result<(LatentTensor, Vec<f64>)>;

    fn token_embedding(&self, token: &str) -> Result<Vec<f64>>;

    /// Raw (unnormalized) cross-attention between the placeholder token of `text`
    /// and spatial positions, averaged over the selected layers and all heads,
    /// resampled to `cfg.resolution × cfg.resolution`.
    fn cross_attention(
        &self,
        image: &RgbImage,
        t: usize,
        text: &TextEmbeddingSequence,
        cfg: &AttentionConfig,
    ) -> Result<Array2<f64>>;
}

/// Resizes `image` to the backend's native input size (bilinear).
pub fn fit_to_backend(backend: &dyn DiffusionBackend, image: &RgbImage) -> RgbImage {
    let (h, w) = backend.input_size();
    resize_rgb(image, h, w)
}

fn check_timestep(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    schedule.alpha_bar(t).map(|_| ())
}

// ---------------------------------------------------------------------------
// Analytic toy backend
// ---------------------------------------------------------------------------

const TOY_VOCAB: &[&str] = &[
    "a", "an", "the", "photo", "picture", "of", "object", "thing", "cat", "dog", "apple", "banana",
    "lemon", "guitar", "car", "bird", "flower", "cup", "chair", "person",
];

/// Latent channel map applied to pooled RGB.
const TOY_CHANNEL_MAP: [[f64; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
];

/// Left inverse of `TOY_CHANNEL_MAP`: `(PᵀP)⁻¹Pᵀ`.
const TOY_CHANNEL_INVERSE: [[f64; 4]; 3] = [
    [11.0 / 12.0, -1.0 / 12.0, -1.0 / 12.0, 0.25],
    [-1.0 / 12.0, 11.0 / 12.0, -1.0 / 12.0, 0.25],
    [-1.0 / 12.0, -1.0 / 12.0, 11.0 / 12.0, 0.25],
];

/// Attention "layers" of the toy, by grid resolution.
const TOY_LAYER_RESOLUTIONS: [usize; 3] = [8, 16, 32];
/// Per-head sharpness of the color-affinity logits.
const TOY_HEAD_SHARPNESS: [f64; 2] = [12.0, 24.0];
const TOY_COLOR_GAIN: f64 = 10.0;
const TOY_EMBED_SCALE: f64 = 0.05;

pub const TOY_D_TEXT: usize = 16;
pub const TOY_LATENT: LatentShape = LatentShape::new(4, 8, 8);
pub const TOY_DOWNSCALE: usize = 8;
pub const TOY_DEFAULT_SEED: u64 = 0x00c0_5eed;

#[derive(Clone, Debug)]
pub struct ToyBackend {
    descriptor: BackendDescriptor,
    schedule: NoiseSchedule,
    vocab: Vec<Vec<f64>>,
    target: Vec<f64>,
    /// `A`, row-major `latent_len × d_text`.
    mixing: Vec<f64>,
    /// Row-major `3 × d_text`.
    color_proj: Vec<f64>,
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new(TOY_DEFAULT_SEED)
    }
}

impl ToyBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    scale * v
                })
                .collect()
        };
        let vocab = TOY_VOCAB.iter().map(|_| normal(TOY_D_TEXT, TOY_EMBED_SCALE)).collect();
        let target = normal(TOY_D_TEXT, TOY_EMBED_SCALE);
        let mixing = normal(TOY_LATENT.len() * TOY_D_TEXT, 1.0 / (TOY_D_TEXT as f64).sqrt());
        let color_proj = normal(3 * TOY_D_TEXT, 1.0);
        Self {
            descriptor: BackendDescriptor {
                kind: BackendKind::Toy,
                model_id: format!("toy-analytic-v1/{seed:#x}"),
                latent_shape: TOY_LATENT,
                d_text: TOY_D_TEXT,
                total_steps: NoiseSchedule::DEFAULT_STEPS,
            },
            schedule: NoiseSchedule::default(),
            vocab,
            target,
            mixing,
            color_proj,
        }
    }

    /// Replaces the noise schedule (its length becomes `total_steps`).
    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.descriptor.total_steps = schedule.total_steps();
        self.schedule = schedule;
        self
    }

    /// The embedding `e*` that zeroes the toy denoising residual.
    pub fn target_embedding(&self) -> &[f64] {
        &self.target
    }

    pub fn vocabulary(&self) -> &'static [&'static str] {
        TOY_VOCAB
    }

    /// `A·v` for `v` of length `d_text`.
    pub fn apply_mixing(&self, v: &[f64]) -> Vec<f64> {
        self.mixing
            .chunks_exact(TOY_D_TEXT)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Aᵀ·u` for `u` of latent length.
    pub fn apply_mixing_transpose(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; TOY_D_TEXT];
        for (row, &w) in self.mixing.chunks_exact(TOY_D_TEXT).zip(u) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        out
    }

    /// RGB color the toy cross-attention responds to for embedding `e`.
    pub fn concept_color(&self, e: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, row) in self.color_proj.chunks_exact(TOY_D_TEXT).enumerate() {
            let logit: f64 = row.iter().zip(e).map(|(a, b)| a * b).sum();
            out[c] = 1.0 / (1.0 + (-TOY_COLOR_GAIN * logit).exp());
        }
        out
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        check_rgb(image)?;
        let (h, w, _) = image.dim();
        if (h, w) != self.input_size() {
            return Err(Error::Shape(format!(
                "toy backend expects {}×{} images, got {h}×{w}",
                self.input_size().0,
                self.input_size().1
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.shape() != self.descriptor.latent_shape {
            return Err(Error::Shape(format!(
                "expected latent {}, got {}",
                self.descriptor.latent_shape,
                z.shape()
            )));
        }
        Ok(())
    }

    fn placeholder_embedding<'a>(&self, text: &'a TextEmbeddingSequence) -> Result<&'a [f64]> {
        let e = text.placeholder_row().ok_or_else(|| {
            Error::Validation("toy backend conditions on the placeholder token; prompt has none".into())
        })?;
        if e.len() != TOY_D_TEXT {
            return Err(Error::Shape(format!("embedding width {} != {TOY_D_TEXT}", e.len())));
        }
        Ok(e)
    }

    fn residual(&self, e: &[f64]) -> Vec<f64> {
        let delta: Vec<f64> = e.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        self.apply_mixing(&delta)
    }

    fn recorded_noise<'a>(&self, z_t: &'a LatentTensor) -> Result<&'a [f64]> {
        z_t.noise_record().ok_or_else(|| {
            Error::Validation("toy noise predictor needs a latent produced by add_noise".into())
        })
    }
}

/// Mean over `factor × factor` blocks of each channel.
fn average_pool(image: &RgbImage, out_h: usize, out_w: usize) -> Array2<[f64; 3]> {
    let (h, w, _) = image.dim();
    let (fy, fx) = (h / out_h, w / out_w);
    let norm = (fy * fx) as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let mut acc = [0.0; 3];
        for y in i * fy..(i + 1) * fy {
            for x in j * fx..(j + 1) * fx {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += image[[y, x, c]];
                }
            }
        }
        acc.map(|a| a / norm)
    })
}

impl DiffusionBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn input_size(&self) -> (usize, usize) {
        let s = self.descriptor.latent_shape;
        (s.height * TOY_DOWNSCALE, s.width * TOY_DOWNSCALE)
    }

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor> {
        self.check_image(image)?;
        let s = self.descriptor.latent_shape;
        let pooled = average_pool(image, s.height, s.width);
        let mut values = Vec::with_capacity(s.len());
        for weights in TOY_CHANNEL_MAP {
            values.extend(pooled.iter().map(|px| px.iter().zip(weights).map(|(p, w)| p * w).sum::<f64>()));
        }
        LatentTensor::new(s, values)
    }

    fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage> {
        self.check_latent(z)?;
        let s = z.shape();
        let plane = s.height * s.width;
        let (h, w) = self.input_size();
        Ok(RgbImage::from_shape_fn((h, w, 3), |(y, x, c)| {
            let idx = (y / TOY_DOWNSCALE) * s.width + x / TOY_DOWNSCALE;
            let v: f64 = (0..s.channels)
                .map(|k| TOY_CHANNEL_INVERSE[c][k] * z.values()[k * plane + idx])
                .sum();
            v.clamp(0.0, 1.0)
        }))
    }

    fn encode_prompt(&self, prompt: &str) -> Result<TextEmbeddingSequence> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Validation("empty prompt".into()));
        }
        let mut rows = Vec::with_capacity(words.len());
        let mut ids = Vec::with_capacity(words.len());
        let mut placeholder = None;
        for (pos, word) in words.iter().enumerate() {
            if *word == PLACEHOLDER_TOKEN {
                if placeholder.is_some() {
                    return Err(Error::Validation("prompt contains the placeholder more than once".into()));
                }
                placeholder = Some(pos);
                ids.push(TOY_VOCAB.len() as u32);
                rows.push(vec![0.0; TOY_D_TEXT]);
                continue;
            }
            let lower = word.to_lowercase();
            let id = TOY_VOCAB
                .iter()
                .position(|v| *v == lower)
                .ok_or_else(|| Error::UnknownToken(word.to_string()))?;
            ids.push(id as u32);
            rows.push(self.vocab[id].clone());
        }
        TextEmbeddingSequence::new(rows, ids, placeholder)
    }

    fn predict_noise(&self, z_t: &LatentTensor, t: usize, text: &TextEmbeddingSequence) -> Result<LatentTensor> {
        self.check_latent(z_t)?;
        check_timestep(&self.schedule, t)?;
        let e = self.placeholder_embedding(text)?;
        let eps = self.recorded_noise(z_t)?;
        let values = eps.iter().zip(self.residual(e)).map(|(n, r)| n + r).collect();
        LatentTensor::new(z_t.shape(), values)
    }

    fn predict_noise_vjp(
        &self,
        z_t: &LatentTensor,
        t: usize,
        text: &TextEmbeddingSequence,
        upstream: &[f64],
    ) -> Result<(LatentTensor, Vec<f64>)> {
        if upstream.len() != z_t.shape().len() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, latent has {}",
                upstream.len(),
                z_t.shape().len()
            )));
        }
        let pred = self.predict_noise(z_t, t, text)?;
        Ok((pred, self.apply_mixing_transpose(upstream)))
    }

    fn token_embedding(&self, token: &str) -> Result<Vec<f64>> {
        let lower = token.to_lowercase();
        TOY_VOCAB
            .iter()
            .position(|v| *v == lower)
            .map(|i| self.vocab[i].clone())
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    fn cross_attention(
        &self,
        image: &RgbImage,
        t: usize,
        text: &TextEmbeddingSequence,
        cfg: &AttentionConfig,
    ) -> Result<Array2<f64>> {
        self.check_image(image)?;
        check_timestep(&self.schedule, t)?;
        if cfg.resolution == 0 {
            return Err(Error::Config("attention resolution must be positive".into()));
        }
        let color = self.concept_color(self.placeholder_embedding(text)?);
        let layers = cfg.layers.select(&TOY_LAYER_RESOLUTIONS)?;
        let mut acc = Array2::<f64>::zeros((cfg.resolution, cfg.resolution));
        for &res in &layers {
            let pooled = average_pool(image, res, res);
            let dist = pooled.mapv(|px| px.iter().zip(color).map(|(p, c)| (p - c).powi(2)).sum::<f64>());
            for sharpness in TOY_HEAD_SHARPNESS {
                let logits = dist.mapv(|d| -sharpness * d);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights = logits.mapv(|l| (l - max).exp());
                // Softmax over positions, rescaled so the mean weight is 1 at every layer.
                let weights = &weights * ((res * res) as f64 / weights.sum());
                acc += &bilinear_resize(weights.view(), cfg.resolution, cfg.resolution);
            }
        }
        acc /= (layers.len() * TOY_HEAD_SHARPNESS.len()) as f64;
        Ok(acc)
    }
}

// ---------------------------------------------------------------------------
// Pretrained latent-diffusion adapter
// ---------------------------------------------------------------------------

/// Descriptor-level handle for a pretrained latent diffusion model.
///
/// This build links no neural-network runtime, so every model-evaluating
/// operation reports [`Error::Unavailable`]; the forward noising process and
/// the schedule are pure arithmetic and work regardless.
#[derive(Clone, Debug)]
pub struct LatentDiffusionAdapter {
    descriptor: BackendDescriptor,
    schedule: NoiseSchedule,
    weights: Option<PathBuf>,
}

impl LatentDiffusionAdapter {
    pub const DEFAULT_MODEL_ID: &'static str = "CompVis/stable-diffusion-v1-4";

    pub fn new(model_id: impl Into<String>, weights: Option<PathBuf>) -> Self {
        Self {
            descriptor: BackendDescriptor {
                kind: BackendKind::LatentDiffusionAdapter,
                model_id: model_id.into(),
                latent_shape: LatentShape::new(4, 64, 64),
                d_text: 768,
                total_steps: NoiseSchedule::DEFAULT_STEPS,
            },
            schedule: NoiseSchedule::default(),
            weights,
        }
    }

    pub fn weights(&self) -> Option<&PathBuf> {
        self.weights.as_ref()
    }

    fn unavailable(&self, op: &str) -> Error {
        let why = match &self.weights {
            None => "no model weights configured".to_string(),
            Some(p) if !p.exists() => format!("weights path {} does not exist", p.display()),
            Some(_) => "no inference runtime is linked into this build".to_string(),
        };
        Error::Unavailable(format!("{op} on `{}`: {why}", self.descriptor.model_id))
    }
}

impl DiffusionBackend for LatentDiffusionAdapter {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn input_size(&self) -> (usize, usize) {
        let s = self.descriptor.latent_shape;
        (s.height * 8, s.width * 8)
    }

    fn encode_image(&self, _image: &RgbImage) -> Result<LatentTensor> {
        Err(self.unavailable("encode_image"))
    }

    fn decode_latent(&self, _z: &LatentTensor) -> Result<RgbImage> {
        Err(self.unavailable("decode_latent"))
    }

    fn encode_prompt(&self, _prompt: &str) -> Result<TextEmbeddingSequence> {
        Err(self.unavailable("encode_prompt"))
    }

    fn predict_noise(&self, _z_t: &LatentTensor, _t: usize, _text: &TextEmbeddingSequence) -> Result<LatentTensor> {
        Err(self.unavailable("predict_noise"))
    }

    fn predict_noise_vjp(
        &self,
        _z_t: &LatentTensor,
        _t: usize,
        _text: &TextEmbeddingSequence,
        _upstream: &[f64],
    ) -> Result<(LatentTensor, Vec<f64>)> {
        Err(self.unavailable("predict_noise"))
    }

    fn token_embedding(&self, _token: &str) -> Result<Vec<f64>> {
        Err(self.unavailable("token_embedding"))
    }

    fn cross_attention(
        &self,
        _image: &RgbImage,
        _t: usize,
        _text: &TextEmbeddingSequence,
        _cfg: &AttentionConfig,
    ) -> Result<Array2<f64>> {
        Err(self.unavailable("cross_attention"))
    }
}
