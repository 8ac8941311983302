//! Synthetic image corruptions and the leading-fraction group protocol.
//!
//! Four corruption kinds with five severities each: additive Gaussian noise,
//! a line-kernel motion blur, a disk-kernel defocus blur and a frost overlay.
//! Severity parameters live in a versioned JSON table that ships with the
//! crate and can be replaced. Every random choice is drawn from a generator
//! seeded by hashing the base seed with the image's file name, so results do
//! not depend on processing order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{list_groups, list_images, GroupImage, ImageGroup};
use crate::error::{Error, Result};
use crate::imaging::{self, RgbImage};

pub const SEVERITY_TABLES_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "corruption_manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SEVERITY: u8 = 3;

const DEFAULT_TABLES: &str = include_str!("../assets/severity_tables.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Frost,
    MotionBlur,
    DefocusBlur,
    GaussianNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [Self::Frost, Self::MotionBlur, Self::DefocusBlur, Self::GaussianNoise];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Frost => "frost",
            Self::MotionBlur => "motion_blur",
            Self::DefocusBlur => "defocus_blur",
            Self::GaussianNoise => "gaussian_noise",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}` (expected frost, motion_blur, defocus_blur or gaussian_noise)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTable {
    pub sigma: [f64; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionTable {
    /// Kernel length in pixels; odd values keep the kernel centred.
    pub length: [usize; 5],
    /// Angles are drawn uniformly from `[-max, max]` degrees.
    pub max_angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefocusTable {
    pub radius: [usize; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrostTable {
    pub image_weight: [f64; 5],
    pub overlay_weight: [f64; 5],
}

/// Per-kind parameters indexed by `severity - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityTables {
    pub format_version: u32,
    pub gaussian_noise: GaussianTable,
    pub motion_blur: MotionTable,
    pub defocus_blur: DefocusTable,
    pub frost: FrostTable,
}

impl Default for SeverityTables {
    fn default() -> Self {
        Self::from_json(DEFAULT_TABLES).expect("bundled severity tables are valid")
    }
}

impl SeverityTables {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SEVERITY_TABLES_VERSION {
            return Err(Error::Config(format!(
                "severity tables version {} (expected {SEVERITY_TABLES_VERSION})",
                self.format_version
            )));
        }
        let bad = |what: &str| Err(Error::Config(format!("invalid severity table entry: {what}")));
        if self.gaussian_noise.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("gaussian_noise.sigma must be finite and non-negative");
        }
        if self.motion_blur.length.contains(&0) {
            return bad("motion_blur.length must be at least 1");
        }
        if !(self.motion_blur.max_angle_deg.is_finite() && self.motion_blur.max_angle_deg >= 0.0) {
            return bad("motion_blur.max_angle_deg");
        }
        let f = &self.frost;
        if f.image_weight.iter().chain(&f.overlay_weight).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("frost weights must be finite and non-negative");
        }
        Ok(())
    }
}

fn severity_index(severity: u8) -> Result<usize> {
    if !(1..=5).contains(&severity) {
        return Err(Error::out_of_range("severity", severity as f64, "{1, …, 5}"));
    }
    Ok(severity as usize - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
    /// Leading fraction of each group (in file-name order) to corrupt.
    pub fraction: f64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind) -> Self {
        Self {
            kind,
            severity: DEFAULT_SEVERITY,
            seed: 0,
            fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        severity_index(self.severity)?;
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::out_of_range("fraction", self.fraction, "[0, 1]"));
        }
        Ok(())
    }

    /// `floor(fraction · n)`.
    pub fn corrupted_count(&self, n: usize) -> usize {
        ((self.fraction * n as f64).floor() as usize).min(n)
    }
}

/// Derives the per-image seed from the base seed and the file name.
pub fn image_seed(base_seed: u64, file_name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(file_name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Additive zero-mean noise of standard deviation `sigma`, before clamping.
pub fn noise_field(shape: (usize, usize, usize), sigma: f64, seed: u64) -> Result<Array3<f64>> {
    if sigma == 0.0 {
        return Ok(Array3::zeros(shape));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array3::from_shape_simple_fn(shape, || normal.sample(&mut rng)))
}

/// Normalized line kernel of odd side `length`, through the centre at `angle` radians.
pub fn line_kernel(length: usize, angle: f64) -> Array2<f64> {
    let size = if length.is_multiple_of(2) { length + 1 } else { length };
    let c = (size / 2) as isize;
    let half = (length as f64 - 1.0) / 2.0;
    let mut k = Array2::zeros((size, size));
    for i in 0..length {
        let d = i as f64 - half;
        let x = c + (d * angle.cos()).round() as isize;
        let y = c - (d * angle.sin()).round() as isize;
        k[[y as usize, x as usize]] = 1.0;
    }
    let total = k.sum();
    k / total
}

/// Normalized disk kernel of the given radius.
pub fn disk_kernel(radius: usize) -> Array2<f64> {
    let r = radius as isize;
    let size = 2 * radius + 1;
    let k = Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as isize - r, x as isize - r);
        if dx * dx + dy * dy <= r * r {
            1.0
        } else {
            0.0
        }
    });
    let total = k.sum();
    k / total
}

/// Correlates every channel with an odd-sized kernel, replicating edge pixels.
pub fn convolve(image: &RgbImage, kernel: &Array2<f64>) -> RgbImage {
    let (kh, kw) = kernel.dim();
    if (kh, kw) == (1, 1) {
        return image * kernel[[0, 0]];
    }
    let (h, w, ch) = image.dim();
    let (cy, cx) = ((kh / 2) as isize, (kw / 2) as isize);
    let taps: Vec<(isize, isize, f64)> = kernel
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((y, x), &v)| (y as isize - cy, x as isize - cx, v))
        .collect();
    let mut out = Array3::zeros((h, w, ch));
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(y, mut row)| {
        for x in 0..w {
            for &(dy, dx, v) in &taps {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                for c in 0..ch {
                    row[[x, c]] += v * image[[sy, sx, c]];
                }
            }
        }
    });
    out
}

const BUILTIN_FROST_SIZE: usize = 512;
const BUILTIN_FROST_COUNT: usize = 3;

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth fractal noise in [0, 1].
fn value_noise(size: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((size, size));
    let (mut amp, mut total) = (1.0, 0.0);
    for o in 0..octaves {
        let cells = 4usize << o;
        let lattice = Array2::from_shape_simple_fn((cells + 1, cells + 1), || rng.random::<f64>());
        let step = size as f64 / cells as f64;
        for ((y, x), v) in acc.indexed_iter_mut() {
            let (fy, fx) = (y as f64 / step, x as f64 / step);
            let (iy, ix) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
            let (ty, tx) = (smoothstep(fy - iy as f64), smoothstep(fx - ix as f64));
            let top = lattice[[iy, ix]] * (1.0 - tx) + lattice[[iy, ix + 1]] * tx;
            let bottom = lattice[[iy + 1, ix]] * (1.0 - tx) + lattice[[iy + 1, ix + 1]] * tx;
            *v += amp * (top * (1.0 - ty) + bottom * ty);
        }
        total += amp;
        amp *= 0.5;
    }
    acc / total
}

/// A tileable frost-like texture: hazy fractal noise with six-armed ice crystals.
fn builtin_frost_texture(index: usize) -> RgbImage {
    let size = BUILTIN_FROST_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(0xf205_7000 + index as u64);
    let haze = value_noise(size, 6, &mut rng);
    let mut crystals = Array2::<f64>::zeros((size, size));
    for _ in 0..size * size / 400 {
        let (cx, cy) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let rot = rng.random_range(0.0..std::f64::consts::PI / 3.0);
        let len = rng.random_range(3.0..14.0);
        let bright = rng.random_range(0.25..0.7);
        for arm in 0..6 {
            let a = rot + arm as f64 * std::f64::consts::PI / 3.0;
            let steps = (len * 2.0) as usize;
            for s in 0..=steps {
                let d = s as f64 / 2.0;
                let x = (cx + d * a.cos()).rem_euclid(size as f64) as usize % size;
                let y = (cy + d * a.sin()).rem_euclid(size as f64) as usize % size;
                let v = bright * (1.0 - d / len).max(0.0);
                crystals[[y, x]] = crystals[[y, x]].max(v);
            }
        }
    }
    let tint = [0.9, 0.95, 1.0];
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let v = 0.45 + 0.4 * haze[[y, x]] + crystals[[y, x]];
        (v * tint[c]).clamp(0.0, 1.0)
    })
}

fn builtin_frost_textures() -> &'static [RgbImage] {
    static TEXTURES: OnceLock<Vec<RgbImage>> = OnceLock::new();
    TEXTURES.get_or_init(|| (0..BUILTIN_FROST_COUNT).into_par_iter().map(builtin_frost_texture).collect())
}

/// Source of frost overlay textures.
#[derive(Clone, Debug, Default)]
pub enum FrostOverlays {
    /// Procedurally generated textures bundled with the crate.
    #[default]
    Builtin,
    Custom(Vec<RgbImage>),
}

impl FrostOverlays {
    /// Loads every image in `dir` as an overlay texture.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("frost overlay directory {} not found", dir.display())));
        }
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Config(format!("frost overlay directory {} has no images", dir.display())));
        }
        files.iter().map(|p| imaging::load_rgb(p)).collect::<Result<_>>().map(Self::Custom)
    }

    fn textures(&self) -> Result<&[RgbImage]> {
        match self {
            Self::Builtin => Ok(builtin_frost_textures()),
            Self::Custom(t) if t.is_empty() => Err(Error::Config("no frost overlay textures".into())),
            Self::Custom(t) => Ok(t),
        }
    }
}

fn upscale_to_cover(texture: &RgbImage, h: usize, w: usize) -> RgbImage {
    let (th, tw, _) = texture.dim();
    if th >= h && tw >= w {
        return texture.clone();
    }
    let s = (h as f64 / th as f64).max(w as f64 / tw as f64);
    let (nh, nw) = (((th as f64 * s).ceil() as usize).max(h), ((tw as f64 * s).ceil() as usize).max(w));
    imaging::resize_rgb(texture, nh, nw)
}

/// Applies corruptions using a severity table and a frost overlay source.
#[derive(Clone, Debug, Default)]
pub struct Corruptor {
    pub tables: SeverityTables,
    pub frost: FrostOverlays,
}

impl Corruptor {
    pub fn new(tables: SeverityTables, frost: FrostOverlays) -> Result<Self> {
        tables.validate()?;
        Ok(Self { tables, frost })
    }

    pub fn gaussian_noise(&self, image: &RgbImage, severity: u8, seed: u64) -> Result<RgbImage> {
        let sigma = self.tables.gaussian_noise.sigma[severity_index(severity)?];
        imaging::check_rgb(image)?;
        if sigma == 0.0 {
            return Ok(image.clone());
        }
        let noise = noise_field(image.dim(), sigma, seed)?;
        Ok((image + &noise).mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// Kernel used by [`Corruptor::motion_blur`] for this severity and seed.
    pub fn motion_kernel(&self, severity: u8, seed: u64) -> Result<Array2<f64>> {
        let length = self.tables.motion_blur.length[severity_index(severity)?];
        let max = self.tables.motion_blur.max_angle_deg.to_radians();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        Ok(line_kernel(length, angle))
    }

    pub fn motion_blur(&self, image: &RgbImage, severity: u8, seed: u64) -> Result<RgbImage> {
        let kernel = self.motion_kernel(severity, seed)?;
        imaging::check_rgb(image)?;
        Ok(convolve(image, &kernel).mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn defocus_blur(&self, image: &RgbImage, severity: u8, _seed: u64) -> Result<RgbImage> {
        let radius = self.tables.defocus_blur.radius[severity_index(severity)?];
        imaging::check_rgb(image)?;
        Ok(convolve(image, &disk_kernel(radius)).mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// The overlay crop frost would blend into an `h × w` image under `seed`.
    pub fn frost_overlay(&self, h: usize, w: usize, seed: u64) -> Result<RgbImage> {
        let textures = self.frost.textures()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = upscale_to_cover(&textures[rng.random_range(0..textures.len())], h, w);
        let (th, tw, _) = texture.dim();
        let y0 = rng.random_range(0..=th - h);
        let x0 = rng.random_range(0..=tw - w);
        Ok(texture.slice(ndarray::s![y0..y0 + h, x0..x0 + w, ..]).to_owned())
    }

    pub fn frost(&self, image: &RgbImage, severity: u8, seed: u64) -> Result<RgbImage> {
        let i = severity_index(severity)?;
        let (a, b) = (self.tables.frost.image_weight[i], self.tables.frost.overlay_weight[i]);
        imaging::check_rgb(image)?;
        let (h, w, _) = image.dim();
        let overlay = self.frost_overlay(h, w, seed)?;
        if b == 0.0 && a == 1.0 {
            return Ok(image.clone());
        }
        Ok((image * a + &overlay * b).mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn apply(&self, image: &RgbImage, kind: CorruptionKind, severity: u8, seed: u64) -> Result<RgbImage> {
        match kind {
            CorruptionKind::Frost => self.frost(image, severity, seed),
            CorruptionKind::MotionBlur => self.motion_blur(image, severity, seed),
            CorruptionKind::DefocusBlur => self.defocus_blur(image, severity, seed),
            CorruptionKind::GaussianNoise => self.gaussian_noise(image, severity, seed),
        }
    }

    /// Corrupts the first `floor(fraction · N)` images of a file-name-sorted group.
    pub fn corrupt_group(&self, group: &ImageGroup, spec: &CorruptionSpec) -> Result<ImageGroup> {
        spec.validate()?;
        check_sorted(group)?;
        let k = spec.corrupted_count(group.len());
        let images = group
            .images
            .par_iter()
            .enumerate()
            .map(|(i, img)| -> Result<GroupImage> {
                if i >= k {
                    return Ok(img.clone());
                }
                let seed = image_seed(spec.seed, &img.file_name);
                let pixels = self
                    .apply(&img.image, spec.kind, spec.severity, seed)
                    .map_err(|e| Error::InImage {
                        id: img.id.clone(),
                        source: Box::new(e),
                    })?;
                Ok(GroupImage::from_pixels(img.file_name.clone(), pixels, img.mask.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(ImageGroup::new(group.name.clone(), images))
    }

    /// Writes a corrupted copy of `root` to `out`.
    ///
    /// Corrupted images are re-encoded in their original format; clean images
    /// are copied byte for byte. A manifest is written to `out`.
    pub fn corrupt_dataset(&self, root: &Path, out: &Path, spec: &CorruptionSpec) -> Result<CorruptionManifest> {
        spec.validate()?;
        if !root.is_dir() {
            return Err(Error::Validation(format!("dataset root {} is not a directory", root.display())));
        }
        let (croot, cout) = (canonical(root), canonical(out));
        if cout.starts_with(&croot) {
            return Err(Error::Config(format!(
                "output {} must not be inside the input tree {}",
                out.display(),
                root.display()
            )));
        }
        let mut groups = BTreeMap::new();
        for dir in list_groups(root)? {
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            let files = list_images(&dir)?;
            if files.is_empty() {
                return Err(Error::Validation(format!("group `{name}` ({}) contains no images", dir.display())));
            }
            let k = spec.corrupted_count(files.len());
            let target = out.join(&name);
            std::fs::create_dir_all(&target).map_err(|e| Error::io(format!("creating {}", target.display()), e))?;
            files
                .par_iter()
                .enumerate()
                .map(|(i, path)| -> Result<()> {
                    let file_name = path.file_name().unwrap().to_string_lossy().into_owned();
                    let dest = target.join(&file_name);
                    if i >= k {
                        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                        return imaging::write_atomic(&dest, &bytes);
                    }
                    let image = imaging::load_rgb(path)?;
                    let corrupted = self
                        .apply(&image, spec.kind, spec.severity, image_seed(spec.seed, &file_name))
                        .map_err(|e| Error::InImage {
                            id: file_name.clone(),
                            source: Box::new(e),
                        })?;
                    imaging::write_atomic(&dest, &imaging::encode_rgb_like(&corrupted, &dest)?)
                })
                .collect::<Result<Vec<()>>>()?;
            let names: Vec<String> = files
                .iter()
                .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
                .collect();
            groups.insert(
                name,
                GroupManifest {
                    corrupted: names[..k].to_vec(),
                    clean: names[k..].to_vec(),
                },
            );
        }
        let manifest = CorruptionManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            spec: spec.clone(),
            ordering: "lexicographic file name".into(),
            tables: self.tables.clone(),
            frost_overlays: match self.frost {
                FrostOverlays::Builtin => "builtin".into(),
                FrostOverlays::Custom(ref t) => format!("custom ({} textures)", t.len()),
            },
            groups,
        };
        imaging::write_atomic(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }
}

fn canonical(p: &Path) -> PathBuf {
    // The output directory may not exist yet; resolve its nearest existing ancestor.
    let mut existing = p.to_path_buf();
    let mut tail = Vec::new();
    while !existing.exists() {
        match (existing.file_name(), existing.parent()) {
            (Some(name), Some(parent)) => {
                tail.push(name.to_os_string());
                existing = parent.to_path_buf();
            }
            _ => break,
        }
    }
    let mut base = std::fs::canonicalize(&existing).unwrap_or(existing);
    for part in tail.into_iter().rev() {
        base.push(part);
    }
    base
}

fn check_sorted(group: &ImageGroup) -> Result<()> {
    if group.images.windows(2).any(|w| w[0].file_name > w[1].file_name) {
        return Err(Error::Validation(format!("group `{}` is not sorted by file name", group.name)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub corrupted: Vec<String>,
    pub clean: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub spec: CorruptionSpec,
    pub ordering: String,
    pub tables: SeverityTables,
    pub frost_overlays: String,
    pub groups: BTreeMap<String, GroupManifest>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> RgbImage {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            let gx = x as f64 / (w - 1) as f64;
            let gy = y as f64 / (h - 1) as f64;
            let disc = ((x as f64 - w as f64 / 2.0).powi(2) + (y as f64 - h as f64 / 2.0).powi(2)).sqrt() < h as f64 / 4.0;
            let base = 0.2 + 0.5 * gx * (1.0 - 0.3 * gy) + if disc { 0.2 } else { 0.0 };
            (base + 0.05 * c as f64).clamp(0.0, 1.0)
        })
    }

    fn degenerate_tables() -> SeverityTables {
        let mut t = SeverityTables::default();
        t.gaussian_noise.sigma = [0.0; 5];
        t.motion_blur.length = [1; 5];
        t.defocus_blur.radius = [0; 5];
        t.frost.image_weight = [1.0; 5];
        t.frost.overlay_weight = [0.0; 5];
        t
    }

    #[test]
    fn default_tables_match_asset() {
        let t = SeverityTables::default();
        assert_eq!(t.gaussian_noise.sigma, [0.08, 0.12, 0.18, 0.26, 0.38]);
        assert_eq!(t.motion_blur.length, [7, 11, 17, 25, 31]);
        assert_eq!(t.defocus_blur.radius, [3, 4, 6, 8, 10]);
        assert_eq!(t.frost.overlay_weight, [0.4, 0.6, 0.7, 0.75, 0.8]);
    }

    #[test]
    fn tables_round_trip_and_reject_bad_versions() {
        let t = SeverityTables::default();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(SeverityTables::from_json(&json).unwrap(), t);
        let bumped = json.replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(SeverityTables::from_json(&bumped), Err(Error::Config(_))));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("motion-blur".parse::<CorruptionKind>().unwrap(), CorruptionKind::MotionBlur);
        assert_eq!("Frost".parse::<CorruptionKind>().unwrap(), CorruptionKind::Frost);
        assert!("snow".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn invalid_severity_rejected() {
        let c = Corruptor::default();
        let img = test_image(8, 8);
        for kind in CorruptionKind::ALL {
            for sev in [0u8, 6] {
                assert!(matches!(c.apply(&img, kind, sev, 0), Err(Error::OutOfRange { .. })));
            }
        }
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let c = Corruptor::new(degenerate_tables(), FrostOverlays::Builtin).unwrap();
        let img = test_image(20, 24);
        for kind in CorruptionKind::ALL {
            assert_eq!(c.apply(&img, kind, 3, 7).unwrap(), img, "{kind}");
        }
    }

    #[test]
    fn deterministic_and_range_preserving() {
        let c = Corruptor::default();
        let img = test_image(24, 32);
        for kind in CorruptionKind::ALL {
            let a = c.apply(&img, kind, 4, 11).unwrap();
            assert_eq!(a, c.apply(&img, kind, 4, 11).unwrap());
            assert_eq!(a.dim(), img.dim());
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blurs_keep_constant_images() {
        let c = Corruptor::default();
        let img = Array3::from_elem((30, 30, 3), 0.37);
        for sev in 1..=5 {
            for kind in [CorruptionKind::MotionBlur, CorruptionKind::DefocusBlur] {
                let out = c.apply(&img, kind, sev, 5).unwrap();
                assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn kernels_sum_to_one() {
        let t = SeverityTables::default();
        for &r in &t.defocus_blur.radius {
            assert!((disk_kernel(r).sum() - 1.0).abs() < 1e-9);
        }
        for &l in &t.motion_blur.length {
            for angle in [-0.7, 0.0, 0.3, 0.785] {
                let k = line_kernel(l, angle);
                assert!((k.sum() - 1.0).abs() < 1e-12);
                assert_eq!(k.dim().0 % 2, 1);
            }
        }
        assert_eq!(line_kernel(1, 0.4).dim(), (1, 1));
        assert_eq!(disk_kernel(0).dim(), (1, 1));
    }

    #[test]
    fn horizontal_motion_blur_is_a_moving_average() {
        let (h, w, l) = (5, 40, 7);
        let img = Array3::from_shape_fn((h, w, 3), |(_, x, _)| if x < 20 { 0.1 } else { 0.9 });
        let out = convolve(&img, &line_kernel(l, 0.0));
        let row: Vec<f64> = (0..w).map(|x| img[[0, x, 0]]).collect();
        let half = (l / 2) as isize;
        for x in 0..w as isize {
            let expected: f64 = (-half..=half)
                .map(|d| row[(x + d).clamp(0, w as isize - 1) as usize])
                .sum::<f64>()
                / l as f64;
            for y in 0..h {
                assert!((out[[y, x as usize, 1]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_noise_std_matches_table() {
        let t = SeverityTables::default();
        for (sev, &sigma) in (1u8..=5).zip(&t.gaussian_noise.sigma) {
            let field = noise_field((128, 128, 3), sigma, image_seed(3, "gray.png")).unwrap();
            let n = field.len() as f64;
            let mean = field.sum() / n;
            let std = (field.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0)).sqrt();
            assert!((std / sigma - 1.0).abs() < 0.02, "severity {sev}: {std} vs {sigma}");
        }
    }

    #[test]
    fn severity_is_monotone_in_deviation() {
        let c = Corruptor::default();
        let img = test_image(96, 96);
        for kind in CorruptionKind::ALL {
            let mad: Vec<f64> = (1..=5)
                .map(|s| (c.apply(&img, kind, s, 21).unwrap() - &img).mapv(f64::abs).mean().unwrap())
                .collect();
            assert!(mad.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{kind}: {mad:?}");
        }
    }

    #[test]
    fn frost_overlay_crop_is_seeded() {
        let c = Corruptor::default();
        let a = c.frost_overlay(40, 50, 1).unwrap();
        assert_eq!(a, c.frost_overlay(40, 50, 1).unwrap());
        assert_ne!(a, c.frost_overlay(40, 50, 2).unwrap());
        let big = c.frost_overlay(700, 600, 1).unwrap();
        assert_eq!(big.dim(), (700, 600, 3));
    }

    #[test]
    fn missing_overlay_dir_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(FrostOverlays::from_dir(&dir.path().join("nope")), Err(Error::Config(_))));
        assert!(matches!(FrostOverlays::from_dir(dir.path()), Err(Error::Config(_))));
        let c = Corruptor::new(SeverityTables::default(), FrostOverlays::Custom(vec![])).unwrap();
        let err = c.frost(&test_image(8, 8), 3, 0).unwrap_err();
        assert!(err.is_configuration());
    }

    #[test]
    fn group_floor_rule() {
        let c = Corruptor::default();
        for (n, expected) in [(4usize, 2usize), (1, 0), (5, 2)] {
            let images = (0..n)
                .map(|i| GroupImage::from_pixels(format!("{i:02}.png"), test_image(16, 16), None))
                .collect();
            let g = ImageGroup::new("g", images);
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise);
            let out = c.corrupt_group(&g, &spec).unwrap();
            let changed = out.images.iter().zip(&g.images).filter(|(a, b)| a.image != b.image).count();
            assert_eq!(changed, expected);
            assert!(out.images[expected..] == g.images[expected..]);
            let none = c.corrupt_group(&g, &CorruptionSpec { fraction: 0.0, ..spec }).unwrap();
            assert_eq!(none, g);
        }
    }

    #[test]
    fn per_image_seed_depends_on_name() {
        assert_ne!(image_seed(0, "a.png"), image_seed(0, "b.png"));
        assert_ne!(image_seed(0, "a.png"), image_seed(1, "a.png"));
        assert_eq!(image_seed(5, "a.png"), image_seed(5, "a.png"));
    }
}
