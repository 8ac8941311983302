//! `cosod`: learn group concepts, segment co-salient objects, evaluate and
//! corrupt datasets.
//!
//! Exit status: 0 on success, 1 when some groups or images failed, 2 on
//! configuration or validation errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cosod_core::backend::{BackendKind, DiffusionBackend};
use cosod_core::concept::{concept_from_token, learn_concept, ConceptFile, LearnConfig, TimestepSampling};
use cosod_core::corruption::{CorruptionKind, CorruptionSpec, Corruptor, FrostOverlays, SeverityTables};
use cosod_core::dataset::{load_dataset, load_group};
use cosod_core::imaging::{gray_png, mask_png, write_atomic};
use cosod_core::metrics::{evaluate_dataset, MetricConfig};
use cosod_core::pipeline::{run_pipeline, BackendConfig, RunConfig};
use cosod_core::segmentation::{segment_group, FailurePolicy, HeadKind, SegmentConfig};
use cosod_core::synthetic::{synthetic_groups, write_groups, SyntheticSpec};
use cosod_core::backend::ToyBackend;

#[derive(Parser)]
#[command(name = "cosod", version, about = "Concept-guided co-salient object detection")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a concept embedding from one image group.
    Learn(LearnArgs),
    /// Segment a group with a saved concept.
    Segment(SegmentArgs),
    /// Learn, segment and evaluate every group of a dataset.
    Run(RunArgs),
    /// Score predicted maps against ground-truth masks.
    Eval(EvalArgs),
    /// Write a corrupted copy of a dataset.
    Corrupt(CorruptArgs),
    /// Write per-group comparison montages.
    Viz(VizArgs),
    /// Write the synthetic demo dataset (images/ and gt/).
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    Toy,
    Sd,
}

impl From<BackendChoice> for BackendKind {
    fn from(b: BackendChoice) -> Self {
        match b {
            BackendChoice::Toy => BackendKind::Toy,
            BackendChoice::Sd => BackendKind::LatentDiffusionAdapter,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadChoice {
    Passthrough,
    Pretrained,
}

impl From<HeadChoice> for HeadKind {
    fn from(h: HeadChoice) -> Self {
        match h {
            HeadChoice::Passthrough => HeadKind::Passthrough,
            HeadChoice::Pretrained => HeadKind::Pretrained,
        }
    }
}

#[derive(Args, Default)]
struct BackendArgs {
    /// Diffusion backend.
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// Model weights for the sd backend.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
    /// Parameter seed of the toy backend.
    #[arg(long)]
    toy_seed: Option<u64>,
}

impl BackendArgs {
    fn apply(&self, cfg: &mut BackendConfig) {
        if let Some(b) = self.backend {
            cfg.kind = b.into();
        }
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        if let Some(m) = &self.model_id {
            cfg.model_id = Some(m.clone());
        }
        if let Some(s) = self.toy_seed {
            cfg.seed = s;
        }
    }

    fn build(&self) -> Result<Box<dyn DiffusionBackend>> {
        let mut cfg = BackendConfig::default();
        self.apply(&mut cfg);
        Ok(cfg.build()?)
    }
}

#[derive(Args, Default)]
struct LearnOverrides {
    /// Oversampling ratio of the middle timestep interval.
    #[arg(long)]
    alpha: Option<f64>,
    /// Draw timesteps uniformly instead of resampling.
    #[arg(long, conflicts_with = "alpha")]
    uniform_timesteps: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    init_token: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl LearnOverrides {
    fn apply(&self, cfg: &mut LearnConfig) {
        if self.uniform_timesteps {
            cfg.timesteps = TimestepSampling::Uniform;
        }
        if let Some(a) = self.alpha {
            cfg.timesteps = match &cfg.timesteps {
                TimestepSampling::Resampled(r) => TimestepSampling::Resampled(cosod_core::concept::ResamplingConfig {
                    alpha: a,
                    ..r.clone()
                }),
                TimestepSampling::Uniform => {
                    TimestepSampling::Resampled(cosod_core::concept::ResamplingConfig::with_alpha(a))
                }
            };
        }
        if let Some(v) = self.steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = &self.init_token {
            cfg.init_token = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    group: PathBuf,
    /// Output `*.concept.json` file.
    #[arg(long)]
    out: PathBuf,
    /// Skip training and use this vocabulary token's embedding as the concept.
    #[arg(long)]
    from_token: Option<String>,
    #[command(flatten)]
    learn: LearnOverrides,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Default)]
struct SegmentOverrides {
    /// Binarization threshold λ.
    #[arg(long)]
    threshold: Option<f64>,
    /// Diffusion timestep for attention extraction.
    #[arg(long = "t")]
    timestep: Option<usize>,
    #[arg(long, value_enum)]
    head: Option<HeadChoice>,
    #[arg(long)]
    head_weights: Option<PathBuf>,
}

impl SegmentOverrides {
    fn apply(&self, cfg: &mut SegmentConfig) {
        if let Some(t) = self.timestep {
            cfg.timestep = t;
        }
        if let Some(h) = self.head {
            cfg.head = h.into();
        }
        if let Some(w) = &self.head_weights {
            cfg.head_weights = Some(w.clone());
        }
    }
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    group: PathBuf,
    #[arg(long)]
    concept: PathBuf,
    /// Output directory; binary maps go to `binary/`, soft maps to `soft/`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    segment: SegmentOverrides,
    /// Also write the soft saliency maps.
    #[arg(long)]
    save_soft: bool,
    #[arg(long)]
    fail_fast: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    learn: LearnOverrides,
    #[command(flatten)]
    segment: SegmentOverrides,
    #[command(flatten)]
    backend: BackendArgs,
    /// Groups processed concurrently (0 = all cores).
    #[arg(long)]
    parallel_groups: Option<usize>,
    #[arg(long)]
    fail_fast: bool,
    /// Relearn concepts even when a matching cached file exists.
    #[arg(long)]
    no_reuse: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0.3)]
    beta_sq: f64,
    #[arg(long, default_value_t = 256)]
    n_thresholds: usize,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// frost, motion_blur, defocus_blur or gaussian_noise.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 3)]
    severity: u8,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replacement severity tables (JSON).
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Directory of frost overlay images replacing the built-in textures.
    #[arg(long)]
    frost_dir: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long, default_value_t = 6)]
    images: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

enum Outcome {
    Success,
    Partial,
}

fn learn(args: LearnArgs) -> Result<Outcome> {
    let backend = args.backend.build()?;
    let concept = match &args.from_token {
        Some(token) => concept_from_token(backend.as_ref(), token)?,
        None => {
            let mut cfg = LearnConfig::default();
            args.learn.apply(&mut cfg);
            let group = load_group(&args.group, None)?;
            let outcome = learn_concept(backend.as_ref(), &group, &cfg)?;
            log::info!(
                "learned concept for {} in {} steps (loss {:.4e} -> {:.4e})",
                group.name,
                cfg.max_steps,
                outcome.initial_loss(),
                outcome.final_loss
            );
            outcome.concept
        }
    };
    concept.save(&args.out)?;
    println!("{}", args.out.display());
    Ok(Outcome::Success)
}

fn segment(args: SegmentArgs) -> Result<Outcome> {
    let backend = args.backend.build()?;
    let concept = ConceptFile::load(&args.concept)
        .with_context(|| format!("loading concept {}", args.concept.display()))?
        .concept;
    let mut cfg = SegmentConfig::default();
    args.segment.apply(&mut cfg);
    if let Some(t) = args.segment.threshold {
        cfg.lambda = t;
    }
    let group = load_group(&args.group, None)?;
    let policy = if args.fail_fast {
        FailurePolicy::FailFast
    } else {
        FailurePolicy::SkipAndReport
    };
    let mut failed = 0;
    for o in segment_group(backend.as_ref(), &group, &concept, &cfg, policy)? {
        match o.result {
            Ok((soft, binary)) => {
                let name = format!("{}.png", o.image_id);
                write_atomic(&args.out.join("binary").join(&name), &mask_png(binary.values().view()))?;
                if args.save_soft {
                    write_atomic(&args.out.join("soft").join(&name), &gray_png(soft.values().view()))?;
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("image {}: {e}", o.image_id);
            }
        }
    }
    println!("segmented {}/{} images of {}", group.len() - failed, group.len(), group.name);
    Ok(if failed > 0 { Outcome::Partial } else { Outcome::Success })
}

fn run(args: RunArgs) -> Result<Outcome> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    args.backend.apply(&mut cfg.backend);
    args.learn.apply(&mut cfg.learn);
    args.segment.apply(&mut cfg.segment);
    if let Some(t) = args.segment.threshold {
        cfg.lambda = t;
    }
    if let Some(p) = args.parallel_groups {
        cfg.parallel_groups = p;
    }
    cfg.fail_fast |= args.fail_fast;
    if args.no_reuse {
        cfg.reuse_concepts = false;
    }
    let dataset = load_dataset(&args.dataset, args.gt.as_deref())?;
    let summary = run_pipeline(&dataset, cfg, &args.out)?;
    for g in &summary.groups {
        if let Some(e) = &g.error {
            eprintln!("group {} failed: {e}", g.group);
        }
        for f in &g.image_failures {
            eprintln!("group {} image {} failed: {}", g.group, f.image_id, f.error);
        }
    }
    if let Some(a) = &summary.aggregates {
        println!("{}", serde_json::to_string_pretty(a)?);
    }
    println!(
        "{} groups, {} failed; outputs in {}",
        summary.groups.len(),
        summary.failed_groups(),
        args.out.display()
    );
    Ok(if summary.failed_groups() > 0 { Outcome::Partial } else { Outcome::Success })
}

fn eval(args: EvalArgs) -> Result<Outcome> {
    let cfg = MetricConfig {
        lambda: args.threshold,
        beta_sq: args.beta_sq,
        n_thresholds: args.n_thresholds,
    };
    let report = evaluate_dataset(&args.pred, &args.gt, &cfg)?;
    report.write(&args.report, None)?;
    println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
    for m in &report.missing_predictions {
        eprintln!("missing prediction: {m} (scored as all-zero)");
    }
    Ok(Outcome::Success)
}

fn corrupt(args: CorruptArgs) -> Result<Outcome> {
    let tables = match &args.tables {
        Some(p) => SeverityTables::load(p)?,
        None => SeverityTables::default(),
    };
    let frost = match &args.frost_dir {
        Some(d) => FrostOverlays::from_dir(d)?,
        None => FrostOverlays::Builtin,
    };
    let spec = CorruptionSpec {
        kind: args.kind.parse::<CorruptionKind>()?,
        severity: args.severity,
        seed: args.seed,
        fraction: args.fraction,
    };
    let manifest = Corruptor::new(tables, frost)?.corrupt_dataset(&args.dataset, &args.out, &spec)?;
    let corrupted: usize = manifest.groups.values().map(|g| g.corrupted.len()).sum();
    let total: usize = manifest.groups.values().map(|g| g.corrupted.len() + g.clean.len()).sum();
    println!(
        "{} severity {}: corrupted {corrupted}/{total} images in {} groups",
        spec.kind,
        spec.severity,
        manifest.groups.len()
    );
    Ok(Outcome::Success)
}

fn viz(args: VizArgs) -> Result<Outcome> {
    let s = cosod_core::viz::write_montages(&args.pred, &args.gt, &args.images, &args.out)?;
    for m in &s.missing {
        eprintln!("missing: {m}");
    }
    println!("wrote {} montages to {}", s.montages.len(), args.out.display());
    Ok(if s.missing.is_empty() { Outcome::Success } else { Outcome::Partial })
}

fn synth(args: SynthArgs) -> Result<Outcome> {
    let spec = SyntheticSpec {
        groups: args.groups,
        images_per_group: args.images,
        seed: args.seed,
        ..SyntheticSpec::for_toy(&ToyBackend::default())
    };
    write_groups(&synthetic_groups(&spec), &args.out.join("images"), &args.out.join("gt"))?;
    println!("{}", args.out.display());
    Ok(Outcome::Success)
}

fn is_configuration(err: &anyhow::Error) -> bool {
    err.chain()
        .find_map(|e| e.downcast_ref::<cosod_core::Error>())
        .is_some_and(cosod_core::Error::is_configuration)
}

fn ensure_not_same(a: &Path, b: &Path) -> Result<()> {
    if a == b {
        return Err(cosod_core::Error::Config(format!("input and output are both {}", a.display())).into());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Learn(a) => learn(a),
        Command::Segment(a) => {
            ensure_not_same(&a.group, &a.out)?;
            segment(a)
        }
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Viz(a) => viz(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match dispatch(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_configuration(&e) { 2 } else { 1 })
        }
    }
}
