//! Pixel containers, resampling, and PNG/JPEG IO.
//!
//! RGB images are `(height, width, 3)` arrays with values in `[0, 1]`;
//! single-channel maps are `(height, width)` arrays.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type RgbImage = Array3<f64>;

/// Validates the `(H, W, 3)` layout and that every value is finite and in `[0, 1]`.
pub fn check_rgb(image: &RgbImage) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("expected non-empty H×W×3 image, got {h}×{w}×{c}")));
    }
    if let Some(v) = image.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite pixel value {v}")));
    }
    if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// Output pixel `(i, j)` samples the source at
/// `((i + 0.5) * h_in / h_out - 0.5, (j + 0.5) * w_in / w_out - 0.5)`.
pub fn bilinear_resize(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|i| source_coord(i, in_h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|j| source_coord(j, in_w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = rows[i];
        let (x0, x1, fx) = cols[j];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

pub fn resize_rgb(image: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    let (h, w, _) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, 3));
    for c in 0..3 {
        let plane = bilinear_resize(image.index_axis(Axis(2), c), out_h, out_w);
        out.index_axis_mut(Axis(2), c).assign(&plane);
    }
    out
}

/// Nearest-neighbour resize for masks.
pub fn resize_mask(mask: &Array2<bool>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y = ((i * h) / out_h).min(h - 1);
        let x = ((j * w) / out_w).min(w - 1);
        mask[[y, x]]
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Grayscale map in `[0, 1]` (value / 255).
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

/// Ground-truth mask: foreground where the 8-bit gray value is at least 128.
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

pub fn to_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn png_bytes<P, C>(img: &image::ImageBuffer<P, C>) -> Vec<u8>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

/// Encodes a `[0, 1]` map as 8-bit grayscale PNG with value `round(255 * s)`.
pub fn gray_png(map: ArrayView2<f64>) -> Vec<u8> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(map[[y as usize, x as usize]])]));
    png_bytes(&img)
}

/// Encodes a mask as PNG with values {0, 255}.
pub fn mask_png(mask: ArrayView2<bool>) -> Vec<u8> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    png_bytes(&img)
}

pub fn rgb_png(image: &RgbImage) -> Vec<u8> {
    let (h, w, _) = image.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(image[[y, x, 0]]), to_u8(image[[y, x, 1]]), to_u8(image[[y, x, 2]])])
    });
    png_bytes(&img)
}

/// Decodes any supported image from memory into `[0, 1]` RGB.
pub fn decode_rgb(bytes: &[u8], name: &Path) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|source| Error::Image {
            path: name.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Encodes an RGB image in the format implied by `path`'s extension
/// (JPEG for `.jpg`/`.jpeg`, PNG otherwise).
pub fn encode_rgb_like(image: &RgbImage, path: &Path) -> Result<Vec<u8>> {
    let is_jpeg = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("jpg") || e.eq_ignore_ascii_case("jpeg"))
        .unwrap_or(false);
    if !is_jpeg {
        return Ok(rgb_png(image));
    }
    let (h, w, _) = image.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(image[[y, x, 0]]), to_u8(image[[y, x, 1]]), to_u8(image[[y, x, 2]])])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Jpeg).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

/// Writes `bytes` to `path` via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::io(format!("temp file in {}", dir.display()), e))?;
    tmp.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(format!("renaming into {}", path.display()), e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_identity_when_same_size() {
        let m = array![[0.1, 0.2], [0.3, 0.4]];
        assert_eq!(bilinear_resize(m.view(), 2, 2), m);
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let m = Array2::from_elem((3, 5), 0.625);
        let up = bilinear_resize(m.view(), 7, 11);
        assert!(up.iter().all(|&v| (v - 0.625).abs() < 1e-12));
    }

    #[test]
    fn bilinear_2x_matches_hand_values() {
        // 1×2 → 1×4: positions -0.25, 0.25, 0.75, 1.25 clamp to [0, 1].
        let m = array![[0.0, 1.0]];
        let up = bilinear_resize(m.view(), 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in up.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_png_round_trips_quantized_values() {
        let m = array![[0.0, 0.5], [1.0, 0.2]];
        let bytes = gray_png(m.view());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        std::fs::write(&p, bytes).unwrap();
        let back = load_gray(&p).unwrap();
        assert_eq!(back[[0, 1]], 128.0 / 255.0);
        assert_eq!(back[[1, 0]], 1.0);
        assert_eq!(back[[1, 1]], 51.0 / 255.0);
    }

    #[test]
    fn check_rgb_rejects_nan_and_bad_layout() {
        let mut img = Array3::zeros((2, 2, 3));
        img[[0, 0, 0]] = f64::NAN;
        assert!(matches!(check_rgb(&img), Err(Error::Validation(_))));
        assert!(matches!(check_rgb(&Array3::zeros((2, 2, 4))), Err(Error::Shape(_))));
    }
}
