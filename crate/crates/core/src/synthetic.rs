//! Deterministic synthetic co-saliency groups for smoke tests and demos.
//!
//! Every image in a group shows one object painted in a common color on a
//! cluttered background of other colors. The object color defaults to the
//! toy backend's color for its target concept, so a learned concept attends
//! to the object.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backend::ToyBackend;
use crate::dataset::{GroupImage, ImageGroup};
use crate::error::Result;
use crate::imaging::{mask_png, rgb_png, to_u8, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Diamond,
}

impl Shape {
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Diamond => dx.abs() + dy.abs() <= r * 1.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub images_per_group: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Object color shared by every group.
    pub object_color: [f64; 3],
}

impl SyntheticSpec {
    /// Two groups of six 80×80 images colored for the toy backend's target concept.
    pub fn for_toy(backend: &ToyBackend) -> Self {
        Self {
            groups: 2,
            images_per_group: 6,
            height: 80,
            width: 80,
            seed: 7,
            object_color: backend.concept_color(backend.target_embedding()),
        }
    }
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn distinct_color(rng: &mut ChaCha8Rng, avoid: [f64; 3]) -> [f64; 3] {
    loop {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        if color_distance(c, avoid) > 0.6 {
            return c;
        }
    }
}

fn quantize(image: Array3<f64>) -> Array3<f64> {
    image.mapv(|v| to_u8(v) as f64 / 255.0)
}

/// One image and its mask. Values are quantized to 8 bits so PNG round-trips are exact.
pub fn synthetic_image(spec: &SyntheticSpec, shape: Shape, seed: u64) -> (Array3<f64>, Array2<bool>) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_a = distinct_color(&mut rng, spec.object_color);
    let bg_b = distinct_color(&mut rng, spec.object_color);
    let distractor = distinct_color(&mut rng, spec.object_color);
    let side = h.min(w) as f64;
    let r = rng.random_range(0.16..0.26) * side;
    let cy = rng.random_range(r + 2.0..h as f64 - r - 2.0);
    let cx = rng.random_range(r + 2.0..w as f64 - r - 2.0);
    let dr = rng.random_range(0.08..0.14) * side;
    let (dy0, dx0) = loop {
        let p = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        if ((p.0 - cy).powi(2) + (p.1 - cx).powi(2)).sqrt() > r * 1.4 + dr {
            break p;
        }
    };
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut mask = Array2::from_elem((h, w), false);
    let mut image = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = shape.contains(fy - cy, fx - cx, r);
            mask[[y, x]] = inside;
            let color = if inside {
                spec.object_color
            } else if (fy - dy0).powi(2) + (fx - dx0).powi(2) <= dr * dr {
                distractor
            } else {
                let t = x as f64 / (w - 1) as f64;
                [0, 1, 2].map(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t)
            };
            for c in 0..3 {
                image[[y, x, c]] = (color[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    (quantize(image), mask)
}

/// Groups named `group_a`, `group_b`, … with images `img_00.png`, `img_01.png`, ….
pub fn synthetic_groups(spec: &SyntheticSpec) -> Vec<ImageGroup> {
    const SHAPES: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Diamond];
    (0..spec.groups)
        .map(|g| {
            let images = (0..spec.images_per_group)
                .map(|i| {
                    let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add((g * 1000 + i) as u64);
                    let (image, mask) = synthetic_image(spec, SHAPES[g % SHAPES.len()], seed);
                    GroupImage::from_pixels(format!("img_{i:02}.png"), image, Some(mask))
                })
                .collect();
            ImageGroup::new(format!("group_{}", (b'a' + (g % 26) as u8) as char), images)
        })
        .collect()
}

/// Writes `image_root/<group>/<file>` and `gt_root/<group>/<stem>.png`.
pub fn write_groups(groups: &[ImageGroup], image_root: &Path, gt_root: &Path) -> Result<()> {
    for g in groups {
        for img in &g.images {
            write_atomic(&image_root.join(&g.name).join(&img.file_name), &rgb_png(&img.image))?;
            if let Some(mask) = &img.mask {
                write_atomic(&gt_root.join(&g.name).join(format!("{}.png", img.id)), &mask_png(mask.view()))?;
            }
        }
    }
    Ok(())
}
