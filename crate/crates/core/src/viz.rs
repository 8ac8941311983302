//! Static comparison figures: one montage per group with the input images on
//! the top row, ground truth in the middle and predictions at the bottom.

use std::path::Path;

use ndarray::{s, Array3};

use crate::dataset::{list_groups, list_images, stem};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, load_gray, load_mask, load_rgb, resize_rgb, rgb_png, write_atomic, RgbImage};

pub const TILE: usize = 128;
const GAP: usize = 4;
const MISSING_GRAY: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VizSummary {
    pub montages: Vec<String>,
    /// `group/stem` entries with no prediction or image; drawn as gray tiles.
    pub missing: Vec<String>,
}

fn gray_tile(map: &ndarray::Array2<f64>) -> RgbImage {
    let r = bilinear_resize(map.view(), TILE, TILE);
    Array3::from_shape_fn((TILE, TILE, 3), |(y, x, _)| r[[y, x]].clamp(0.0, 1.0))
}

fn find_image(dir: &Path, id: &str) -> Result<Option<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    Ok(list_images(dir)?
        .into_iter()
        .find(|p| stem(&p.file_name().unwrap().to_string_lossy()) == id))
}

/// Writes `out/<group>.png` for every group under `gt_root`.
pub fn write_montages(pred_root: &Path, gt_root: &Path, images_root: &Path, out: &Path) -> Result<VizSummary> {
    let mut summary = VizSummary::default();
    let groups = list_groups(gt_root)?;
    if groups.is_empty() {
        return Err(Error::Validation(format!("no groups under {}", gt_root.display())));
    }
    for gdir in groups {
        let group = gdir.file_name().unwrap().to_string_lossy().into_owned();
        let masks = list_images(&gdir)?;
        if masks.is_empty() {
            continue;
        }
        let n = masks.len();
        let width = n * TILE + (n + 1) * GAP;
        let height = 3 * TILE + 4 * GAP;
        let mut canvas = Array3::from_elem((height, width, 3), 1.0);
        for (i, mask_path) in masks.iter().enumerate() {
            let id = stem(&mask_path.file_name().unwrap().to_string_lossy());
            let gt = load_mask(mask_path)?.mapv(|m| if m { 1.0 } else { 0.0 });
            let image = match find_image(&images_root.join(&group), &id)? {
                Some(p) => resize_rgb(&load_rgb(&p)?, TILE, TILE),
                None => {
                    summary.missing.push(format!("{group}/{id} (image)"));
                    Array3::from_elem((TILE, TILE, 3), MISSING_GRAY)
                }
            };
            let pred_path = pred_root.join(&group).join(format!("{id}.png"));
            let pred = if pred_path.is_file() {
                gray_tile(&load_gray(&pred_path)?)
            } else {
                summary.missing.push(format!("{group}/{id} (prediction)"));
                Array3::from_elem((TILE, TILE, 3), MISSING_GRAY)
            };
            let x0 = GAP + i * (TILE + GAP);
            for (row, tile) in [image, gray_tile(&gt), pred].into_iter().enumerate() {
                let y0 = GAP + row * (TILE + GAP);
                canvas.slice_mut(s![y0..y0 + TILE, x0..x0 + TILE, ..]).assign(&tile);
            }
        }
        let path = out.join(format!("{group}.png"));
        write_atomic(&path, &rgb_png(&canvas))?;
        summary.montages.push(path.display().to_string());
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{gray_png, mask_png};
    use ndarray::Array2;

    #[test]
    fn montage_layout_and_missing_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let mask = Array2::from_shape_fn((20, 30), |(y, _)| y < 10);
        for id in ["a", "b"] {
            write_atomic(&p.join(format!("gt/g/{id}.png")), &mask_png(mask.view())).unwrap();
            write_atomic(&p.join(format!("img/g/{id}.png")), &rgb_png(&Array3::from_elem((20, 30, 3), 0.2))).unwrap();
        }
        write_atomic(&p.join("pred/g/a.png"), &gray_png(Array2::from_elem((20, 30), 1.0).view())).unwrap();
        let s = write_montages(&p.join("pred"), &p.join("gt"), &p.join("img"), &p.join("out")).unwrap();
        assert_eq!(s.missing, ["g/b (prediction)"]);
        let m = load_rgb(&p.join("out/g.png")).unwrap();
        assert_eq!(m.dim(), (3 * TILE + 4 * GAP, 2 * TILE + 3 * GAP, 3));
        let pred_row = GAP + 2 * (TILE + GAP);
        assert_eq!(m[[pred_row + 5, GAP + 5, 0]], 1.0);
        assert!((m[[pred_row + 5, 2 * GAP + TILE + 5, 0]] - 128.0 / 255.0).abs() < 1e-9);
    }
}
