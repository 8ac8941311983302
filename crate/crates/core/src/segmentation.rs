//! Concept-guided segmentation: cross-attention extraction, the fine
//! segmentation head, and thresholding.

use std::path::PathBuf;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{fit_to_backend, AttentionConfig, DiffusionBackend, LatentTensor};
use crate::concept::{inject_concept, Concept};
use crate::dataset::{GroupImage, ImageGroup};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, RgbImage};

/// Coarse concept-token attention, min-max normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Array2<f64>,
    source_timestep: usize,
}

impl AttentionMap {
    /// Normalizes a raw attention grid. Constant grids become all-zero.
    pub fn from_raw(raw: Array2<f64>, source_timestep: usize) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("raw attention contains non-finite values".into()));
        }
        Ok(Self {
            values: normalize_min_max(raw),
            source_timestep,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn source_timestep(&self) -> usize {
        self.source_timestep
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }
}

pub fn normalize_min_max(mut raw: Array2<f64>) -> Array2<f64> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || max <= min {
        raw.fill(0.0);
        return raw;
    }
    let span = max - min;
    raw.mapv_inplace(|v| ((v - min) / span).clamp(0.0, 1.0));
    raw
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftSaliencyMap(Array2<f64>);

impl SoftSaliencyMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("soft saliency values must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinarySaliencyMap(Array2<bool>);

impl BinarySaliencyMap {
    pub fn new(values: Array2<bool>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<bool> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Pixelwise `s ≥ λ → 1`, otherwise 0.
pub fn binarize(soft: &SoftSaliencyMap, lambda: f64) -> Result<BinarySaliencyMap> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::out_of_range("threshold", lambda, "[0, 1]"));
    }
    Ok(BinarySaliencyMap(soft.0.mapv(|s| s >= lambda)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Passthrough,
    Pretrained,
}

/// Fine-grained segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub enum SegmentationHead {
    /// Parameter-free: upsamples the attention map to image resolution.
    AttentionPassthrough,
    /// Wraps a pretrained attention-conditioned segmentation network.
    PretrainedAdapter { weights: Option<PathBuf> },
}

impl SegmentationHead {
    pub fn from_kind(kind: HeadKind, weights: Option<PathBuf>) -> Self {
        match kind {
            HeadKind::Passthrough => SegmentationHead::AttentionPassthrough,
            HeadKind::Pretrained => SegmentationHead::PretrainedAdapter { weights },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            SegmentationHead::AttentionPassthrough => HeadKind::Passthrough,
            SegmentationHead::PretrainedAdapter { .. } => HeadKind::Pretrained,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub timestep: usize,
    pub lambda: f64,
    pub attention: AttentionConfig,
    pub head: HeadKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_weights: Option<PathBuf>,
    pub prompt_template: String,
    /// Seeds the noise used to form `z_t` for each image.
    pub noise_seed: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            timestep: 400,
            lambda: 0.5,
            attention: AttentionConfig::default(),
            head: HeadKind::Passthrough,
            head_weights: None,
            prompt_template: "a photo of S*".into(),
            noise_seed: 0,
        }
    }
}

impl SegmentConfig {
    pub fn head(&self) -> SegmentationHead {
        SegmentationHead::from_kind(self.head, self.head_weights.clone())
    }
}

fn check_concept(backend: &dyn DiffusionBackend, concept: &Concept) -> Result<()> {
    concept.validate()?;
    if !backend.descriptor().is_compatible(&concept.backend) {
        return Err(Error::Config(format!(
            "concept was made for backend `{}`, not `{}`",
            concept.backend.model_id,
            backend.descriptor().model_id
        )));
    }
    Ok(())
}

/// Cross-attention of the concept token over the image, normalized to `[0, 1]`.
pub fn extract_attention(
    backend: &dyn DiffusionBackend,
    image: &RgbImage,
    concept: &Concept,
    t: usize,
    prompt_template: &str,
    cfg: &AttentionConfig,
) -> Result<AttentionMap> {
    let text = inject_concept(&backend.encode_prompt(prompt_template)?, concept)?;
    let raw = backend.cross_attention(&fit_to_backend(backend, image), t, &text, cfg)?;
    AttentionMap::from_raw(raw, t)
}

/// Soft saliency at `out_size` from the attention map and (for learned heads) the noisy latent.
pub fn fine_segment(
    head: &SegmentationHead,
    z_t: Option<&LatentTensor>,
    t: usize,
    concept: &Concept,
    attn: &AttentionMap,
    out_size: (usize, usize),
) -> Result<SoftSaliencyMap> {
    match head {
        SegmentationHead::AttentionPassthrough => {
            let up = bilinear_resize(attn.values().view(), out_size.0, out_size.1);
            if up.dim() != out_size {
                return Err(Error::Shape(format!("upsampled to {:?}, wanted {out_size:?}", up.dim())));
            }
            SoftSaliencyMap::new(up.mapv(|v| v.clamp(0.0, 1.0)))
        }
        SegmentationHead::PretrainedAdapter { weights } => {
            let _ = (z_t, t, concept);
            let why = match weights {
                None => "no head weights configured".to_string(),
                Some(p) => format!("no inference runtime for head weights {}", p.display()),
            };
            Err(Error::Unavailable(format!("pretrained segmentation head: {why}")))
        }
    }
}

pub type SegmentationPair = (SoftSaliencyMap, BinarySaliencyMap);

/// Full per-image chain at the image's native resolution.
pub fn segment_image(
    backend: &dyn DiffusionBackend,
    image: &RgbImage,
    concept: &Concept,
    cfg: &SegmentConfig,
) -> Result<SegmentationPair> {
    let (h, w, _) = image.dim();
    let attn = extract_attention(backend, image, concept, cfg.timestep, &cfg.prompt_template, &cfg.attention)?;
    let head = cfg.head();
    let z_t = match head {
        SegmentationHead::AttentionPassthrough => None,
        SegmentationHead::PretrainedAdapter { .. } => {
            let z0 = backend.encode_image(&fit_to_backend(backend, image))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
            let eps = LatentTensor::standard_normal(z0.shape(), &mut rng);
            Some(backend.add_noise(&z0, cfg.timestep, &eps)?)
        }
    };
    let soft = fine_segment(&head, z_t.as_ref(), cfg.timestep, concept, &attn, (h, w))?;
    let binary = binarize(&soft, cfg.lambda)?;
    Ok((soft, binary))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    FailFast,
    #[default]
    SkipAndReport,
}

#[derive(Debug)]
pub struct ImageOutcome {
    pub image_id: String,
    pub result: Result<SegmentationPair>,
}

/// Segments every image of the group; results are in input order.
///
/// With [`FailurePolicy::FailFast`] the first failing image (in group order)
/// is returned as an error tagged with its id.
pub fn segment_group(
    backend: &dyn DiffusionBackend,
    group: &ImageGroup,
    concept: &Concept,
    cfg: &SegmentConfig,
    policy: FailurePolicy,
) -> Result<Vec<ImageOutcome>> {
    check_concept(backend, concept)?;
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::out_of_range("threshold", cfg.lambda, "[0, 1]"));
    }
    let outcomes: Vec<ImageOutcome> = group
        .images
        .par_iter()
        .map(|gi: &GroupImage| ImageOutcome {
            image_id: gi.id.clone(),
            result: segment_image(backend, &gi.image, concept, cfg),
        })
        .collect();
    if policy == FailurePolicy::FailFast {
        let mut checked = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            match o.result {
                Err(e) => {
                    return Err(Error::InImage {
                        id: o.image_id,
                        source: Box::new(e),
                    })
                }
                Ok(pair) => checked.push(ImageOutcome {
                    image_id: o.image_id,
                    result: Ok(pair),
                }),
            }
        }
        return Ok(checked);
    }
    Ok(outcomes)
}
