//! End-to-end runs: learn (or reuse) one concept per group, segment every
//! image, write the maps, and score them when ground truth is available.
//!
//! Output layout under `out/`:
//!
//! ```text
//! concepts/<group>.concept.json
//! soft/<group>/<image-stem>.png
//! binary/<group>/<image-stem>.png
//! report/{per_image.csv, curves.csv, summary.json}
//! run_manifest.json
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendDescriptor, BackendKind, DiffusionBackend, LatentDiffusionAdapter, ToyBackend, TOY_DEFAULT_SEED};
use crate::concept::{learn_concept, ConceptFile, LearnConfig, CONCEPT_EXTENSION};
use crate::dataset::{GroupDataset, ImageGroup};
use crate::error::{Error, Result};
use crate::imaging::{gray_png, mask_png, write_atomic};
use crate::metrics::{evaluate_dataset, Aggregates, MetricConfig};
use crate::segmentation::{segment_group, FailurePolicy, SegmentConfig};

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Model identifier for the latent-diffusion adapter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Parameter seed of the toy backend.
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            model_id: None,
            weights: None,
            seed: TOY_DEFAULT_SEED,
        }
    }
}

impl BackendConfig {
    /// Fails with a configuration error when the adapter has no usable weights path.
    pub fn build(&self) -> Result<Box<dyn DiffusionBackend>> {
        Ok(match self.kind {
            BackendKind::Toy => Box::new(ToyBackend::new(self.seed)),
            BackendKind::LatentDiffusionAdapter => Box::new(LatentDiffusionAdapter::new(
                self.model_id.clone().unwrap_or_else(|| LatentDiffusionAdapter::DEFAULT_MODEL_ID.to_string()),
                match &self.weights {
                    Some(w) if w.exists() => Some(w.clone()),
                    Some(w) => return Err(Error::Config(format!("weights path {} does not exist", w.display()))),
                    None => return Err(Error::Config("the latent diffusion backend needs a weights path".into())),
                },
            )),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub backend: BackendConfig,
    pub learn: LearnConfig,
    pub segment: SegmentConfig,
    /// Binarization threshold; overrides `segment.lambda` and `metrics.lambda`.
    pub lambda: f64,
    pub metrics: MetricConfig,
    /// Groups processed concurrently; 0 uses every available core.
    pub parallel_groups: usize,
    /// Stop at the first failing group or image.
    pub fail_fast: bool,
    /// Reuse concept files whose cache key matches.
    pub reuse_concepts: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: RUN_FORMAT_VERSION,
            backend: BackendConfig::default(),
            learn: LearnConfig::default(),
            segment: SegmentConfig::default(),
            lambda: 0.5,
            metrics: MetricConfig::default(),
            parallel_groups: 0,
            fail_fast: false,
            reuse_concepts: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the shared threshold and checks every field.
    pub fn resolve(mut self) -> Result<Self> {
        if self.format_version != RUN_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "run config format_version {} (expected {RUN_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::out_of_range("threshold", self.lambda, "[0, 1]"));
        }
        self.segment.lambda = self.lambda;
        self.metrics.lambda = self.lambda;
        self.metrics.validate()?;
        Ok(self)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn failure_policy(&self) -> FailurePolicy {
        if self.fail_fast {
            FailurePolicy::FailFast
        } else {
            FailurePolicy::SkipAndReport
        }
    }
}

/// Cache key of a learned concept: group content, learning settings and backend identity.
pub fn concept_cache_key(group: &ImageGroup, learn: &LearnConfig, backend: &BackendDescriptor) -> String {
    let mut h = Sha256::new();
    h.update(group.content_hash().as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(learn).expect("learn config serializes"));
    h.update([0u8]);
    h.update(serde_json::to_vec(backend).expect("descriptor serializes"));
    hex::encode(h.finalize())
}

pub fn concept_path(out: &Path, group: &str) -> PathBuf {
    out.join("concepts").join(format!("{group}{CONCEPT_EXTENSION}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub group: String,
    pub images: usize,
    pub maps_written: usize,
    pub concept_reused: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// Set when the whole group failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub image_failures: Vec<ImageFailure>,
}

impl GroupOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.image_failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub run_config: serde_json::Value,
    pub backend: BackendDescriptor,
    pub dataset: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_root: Option<PathBuf>,
    pub groups: Vec<GroupOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregates: Option<Aggregates>,
}

impl RunSummary {
    pub fn failed_groups(&self) -> usize {
        self.groups.iter().filter(|g| !g.succeeded()).count()
    }
}

fn group_concept(
    backend: &dyn DiffusionBackend,
    group: &ImageGroup,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(ConceptFile, bool, Option<f64>)> {
    let key = concept_cache_key(group, &cfg.learn, backend.descriptor());
    let path = concept_path(out, &group.name);
    if cfg.reuse_concepts && path.is_file() {
        match ConceptFile::load(&path) {
            Ok(file) if file.cache_key.as_deref() == Some(key.as_str()) => {
                log::info!("group {}: reusing {}", group.name, path.display());
                return Ok((file, true, None));
            }
            Ok(_) => log::info!("group {}: cached concept is stale, relearning", group.name),
            Err(e) => log::warn!("group {}: ignoring unreadable {}: {e}", group.name, path.display()),
        }
    }
    log::info!("group {}: learning concept from {} images", group.name, group.len());
    let outcome = learn_concept(backend, group, &cfg.learn)?;
    let mut file = outcome.concept.to_file();
    file.cache_key = Some(key);
    file.run_config = Some(cfg.snapshot());
    file.save(&path)?;
    Ok((file, false, Some(outcome.final_loss)))
}

fn process_group(backend: &dyn DiffusionBackend, group: &ImageGroup, cfg: &RunConfig, out: &Path) -> Result<GroupOutcome> {
    let (file, reused, final_loss) = group_concept(backend, group, cfg, out)?;
    let outcomes = segment_group(backend, group, &file.concept, &cfg.segment, cfg.failure_policy())?;
    let mut failures = Vec::new();
    let mut written = 0;
    for o in outcomes {
        match o.result {
            Ok((soft, binary)) => {
                let name = format!("{}.png", o.image_id);
                write_atomic(&out.join("soft").join(&group.name).join(&name), &gray_png(soft.values().view()))?;
                write_atomic(&out.join("binary").join(&group.name).join(&name), &mask_png(binary.values().view()))?;
                written += 1;
            }
            Err(e) => {
                log::warn!("group {}: image {} failed: {e}", group.name, o.image_id);
                failures.push(ImageFailure {
                    image_id: o.image_id,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(GroupOutcome {
        group: group.name.clone(),
        images: group.len(),
        maps_written: written,
        concept_reused: reused,
        final_loss,
        error: None,
        image_failures: failures,
    })
}

fn is_within(child: &Path, parent: &Path) -> bool {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let parent = canon(parent);
    let mut cur = Some(child);
    while let Some(p) = cur {
        if p.exists() {
            return canon(p).starts_with(&parent);
        }
        cur = p.parent();
    }
    false
}

/// Runs the full method over a dataset and writes every artifact under `out`.
///
/// Group failures are recorded in the summary unless `fail_fast` is set, in
/// which case the first failure is returned as the error.
pub fn run_pipeline(dataset: &GroupDataset, cfg: RunConfig, out: &Path) -> Result<RunSummary> {
    let cfg = cfg.resolve()?;
    for input in std::iter::once(&dataset.root).chain(dataset.gt_root.as_ref()) {
        if is_within(out, input) {
            return Err(Error::Config(format!(
                "output {} must not be inside input tree {}",
                out.display(),
                input.display()
            )));
        }
    }
    let backend = cfg.backend.build()?;
    cfg.learn.validate(backend.schedule().total_steps())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel_groups)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let backend_ref: &dyn DiffusionBackend = backend.as_ref();
    let results: Vec<Result<GroupOutcome>> = pool.install(|| {
        dataset
            .groups
            .par_iter()
            .map(|g| {
                process_group(backend_ref, g, &cfg, out).map_err(|e| Error::InImage {
                    id: g.name.clone(),
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let mut groups = Vec::with_capacity(results.len());
    for (g, r) in dataset.groups.iter().zip(results) {
        match r {
            Ok(o) => groups.push(o),
            Err(e) if cfg.fail_fast => return Err(e),
            Err(e) => {
                log::error!("group {} failed: {e}", g.name);
                groups.push(GroupOutcome {
                    group: g.name.clone(),
                    images: g.len(),
                    maps_written: 0,
                    concept_reused: false,
                    final_loss: None,
                    error: Some(e.to_string()),
                    image_failures: vec![],
                });
            }
        }
    }
    let mut aggregates = None;
    if let Some(gt_root) = &dataset.gt_root {
        let report = evaluate_dataset(&out.join("soft"), gt_root, &cfg.metrics)?;
        report.write(&out.join("report"), Some(&cfg.snapshot()))?;
        aggregates = Some(report.aggregate);
    }
    let summary = RunSummary {
        format_version: RUN_FORMAT_VERSION,
        run_config: cfg.snapshot(),
        backend: backend.descriptor().clone(),
        dataset: dataset.root.clone(),
        gt_root: dataset.gt_root.clone(),
        groups,
        aggregates,
    };
    write_atomic(&out.join(RUN_MANIFEST), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::TimestepSampling;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.learn.learning_rate, 5e-4);
        assert_eq!(c.learn.batch_size, 4);
        assert_eq!(c.learn.max_steps, 2000);
        match &c.learn.timesteps {
            TimestepSampling::Resampled(r) => {
                assert_eq!(r.alpha, 1.5);
                let iv = r.intervals();
                assert_eq!((iv[0].start, iv[0].end, iv[1].end, iv[2].end), (0, 300, 800, 1000));
            }
            other => panic!("unexpected default sampling {other:?}"),
        }
    }

    #[test]
    fn config_json_round_trip_and_partial_files() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        let partial = RunConfig::from_json(r#"{"lambda": 0.4, "learn": {"max_steps": 10}}"#).unwrap();
        assert_eq!(partial.learn.max_steps, 10);
        assert_eq!(partial.learn.batch_size, 4);
        let r = partial.resolve().unwrap();
        assert_eq!((r.segment.lambda, r.metrics.lambda), (0.4, 0.4));
        assert!(RunConfig::from_json(r#"{"lamda": 0.4}"#).is_err());
        let bad = RunConfig {
            lambda: 1.5,
            ..RunConfig::default()
        };
        assert!(bad.resolve().unwrap_err().is_configuration());
    }

    #[test]
    fn cache_key_tracks_inputs() {
        let toy = ToyBackend::default();
        let spec = crate::synthetic::SyntheticSpec::for_toy(&toy);
        let groups = crate::synthetic::synthetic_groups(&spec);
        let learn = LearnConfig::default();
        let k = concept_cache_key(&groups[0], &learn, toy.descriptor());
        assert_eq!(k, concept_cache_key(&groups[0], &learn, toy.descriptor()));
        assert_ne!(k, concept_cache_key(&groups[1], &learn, toy.descriptor()));
        let other = LearnConfig { seed: 1, ..learn.clone() };
        assert_ne!(k, concept_cache_key(&groups[0], &other, toy.descriptor()));
        assert_ne!(k, concept_cache_key(&groups[0], &learn, ToyBackend::new(3).descriptor()));
    }

    #[test]
    fn adapter_backend_needs_weights_and_a_runtime() {
        let mut cfg = BackendConfig {
            kind: BackendKind::LatentDiffusionAdapter,
            ..BackendConfig::default()
        };
        assert!(cfg.build().err().unwrap().is_configuration());
        cfg.weights = Some("/nonexistent/model.safetensors".into());
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
        cfg.weights = Some(std::env::temp_dir());
        let b = cfg.build().unwrap();
        assert_eq!(b.descriptor().model_id, LatentDiffusionAdapter::DEFAULT_MODEL_ID);
        assert!(matches!(b.encode_prompt("a photo of S*"), Err(Error::Unavailable(_))));
    }
}
