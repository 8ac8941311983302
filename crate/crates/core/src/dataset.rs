//! Image groups and dataset trees.
//!
//! Layout: `root/<group>/<image>.{jpg,jpeg,png}` with optional masks at
//! `gt_root/<group>/<image-stem>.png`. Groups and images are ordered
//! lexicographically by name.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{self, RgbImage};

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

#[derive(Clone, Debug, PartialEq)]
pub struct GroupImage {
    /// File stem; output maps are written as `<id>.png`.
    pub id: String,
    pub file_name: String,
    pub image: RgbImage,
    pub mask: Option<Array2<bool>>,
    /// SHA-256 of the encoded file, or of the pixel buffer for in-memory images.
    pub digest: [u8; 32],
}

impl GroupImage {
    pub fn from_pixels(file_name: impl Into<String>, image: RgbImage, mask: Option<Array2<bool>>) -> Self {
        let file_name = file_name.into();
        let mut h = Sha256::new();
        for v in image.iter() {
            h.update(v.to_le_bytes());
        }
        Self {
            id: stem(&file_name),
            file_name,
            digest: h.finalize().into(),
            image,
            mask,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.image.dim();
        (h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroup {
    pub name: String,
    pub images: Vec<GroupImage>,
}

impl ImageGroup {
    pub fn new(name: impl Into<String>, images: Vec<GroupImage>) -> Self {
        Self {
            name: name.into(),
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        !self.images.is_empty() && self.images.iter().all(|i| i.mask.is_some())
    }

    /// Hash over file names and contents, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            h.update(img.file_name.as_bytes());
            h.update([0u8]);
            h.update(img.digest);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDataset {
    pub root: PathBuf,
    pub gt_root: Option<PathBuf>,
    pub groups: Vec<ImageGroup>,
}

impl GroupDataset {
    pub fn image_count(&self) -> usize {
        self.groups.iter().map(ImageGroup::len).sum()
    }
}

pub(crate) fn stem(file_name: &str) -> String {
    Path::new(file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_name.to_string())
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
            .unwrap_or(false)
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
        if is_image(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Subdirectories of `dir`, sorted by name.
pub fn list_groups(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(dirs)
}

pub fn load_group(dir: &Path, gt_dir: Option<&Path>) -> Result<ImageGroup> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!("group `{name}` ({}) contains no images", dir.display())));
    }
    let mut images = Vec::with_capacity(files.len());
    for path in files {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let image = imaging::decode_rgb(&bytes, &path)?;
        let file_name = path.file_name().unwrap().to_string_lossy().into_owned();
        let id = stem(&file_name);
        let mask = match gt_dir {
            None => None,
            Some(gt) => {
                let mask_path = gt.join(format!("{id}.png"));
                if !mask_path.is_file() {
                    return Err(Error::Validation(format!(
                        "missing ground-truth mask {} for image {}",
                        mask_path.display(),
                        path.display()
                    )));
                }
                let mask = imaging::load_mask(&mask_path)?;
                let (h, w, _) = image.dim();
                if mask.dim() != (h, w) {
                    return Err(Error::Shape(format!(
                        "mask {} is {}×{} but image {} is {h}×{w}",
                        mask_path.display(),
                        mask.dim().0,
                        mask.dim().1,
                        path.display()
                    )));
                }
                Some(mask)
            }
        };
        images.push(GroupImage {
            id,
            file_name,
            image,
            mask,
            digest: Sha256::digest(&bytes).into(),
        });
    }
    Ok(ImageGroup { name, images })
}

pub fn load_dataset(root: &Path, gt_root: Option<&Path>) -> Result<GroupDataset> {
    if !root.is_dir() {
        return Err(Error::Validation(format!("dataset root {} is not a directory", root.display())));
    }
    let mut groups = Vec::new();
    for dir in list_groups(root)? {
        let gt_dir = gt_root.map(|g| g.join(dir.file_name().unwrap()));
        groups.push(load_group(&dir, gt_dir.as_deref())?);
    }
    if groups.is_empty() {
        return Err(Error::Validation(format!("dataset root {} has no group directories", root.display())));
    }
    Ok(GroupDataset {
        root: root.to_path_buf(),
        gt_root: gt_root.map(Path::to_path_buf),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn write_png(path: &Path, h: usize, w: usize, v: f64) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, imaging::rgb_png(&Array3::from_elem((h, w, 3), v))).unwrap();
    }

    fn write_mask(path: &Path, h: usize, w: usize) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let m = Array2::from_shape_fn((h, w), |(y, _)| y < h / 2);
        std::fs::write(path, imaging::mask_png(m.view())).unwrap();
    }

    fn fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("img");
        let gt = dir.path().join("gt");
        for (g, names) in [("zebra", vec!["b.png", "a.png"]), ("apple", vec!["x.png", "c.png", "m.png"])] {
            for n in names {
                write_png(&root.join(g).join(n), 4, 6, 0.5);
                write_mask(&gt.join(g).join(n), 4, 6);
            }
        }
        dir
    }

    #[test]
    fn groups_and_images_sorted() {
        let dir = fixture();
        let ds = load_dataset(&dir.path().join("img"), Some(&dir.path().join("gt"))).unwrap();
        let names: Vec<_> = ds.groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["apple", "zebra"]);
        let ids: Vec<_> = ds.groups[0].images.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["c", "m", "x"]);
        assert_eq!(ds.image_count(), 5);
        assert!(ds.groups.iter().all(ImageGroup::has_masks));
        let m = ds.groups[0].images[0].mask.as_ref().unwrap();
        assert!(m[[0, 0]] && !m[[3, 0]]);
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = fixture();
        let a = load_dataset(&dir.path().join("img"), Some(&dir.path().join("gt"))).unwrap();
        let b = load_dataset(&dir.path().join("img"), Some(&dir.path().join("gt"))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.groups[0].content_hash(), b.groups[0].content_hash());
    }

    #[test]
    fn missing_mask_is_named() {
        let dir = fixture();
        std::fs::remove_file(dir.path().join("gt/apple/m.png")).unwrap();
        let err = load_dataset(&dir.path().join("img"), Some(&dir.path().join("gt"))).unwrap_err();
        assert!(err.to_string().contains("m.png"), "{err}");
    }

    #[test]
    fn empty_group_is_named() {
        let dir = fixture();
        std::fs::create_dir_all(dir.path().join("img/empty")).unwrap();
        let err = load_dataset(&dir.path().join("img"), None).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn mask_size_mismatch() {
        let dir = fixture();
        write_mask(&dir.path().join("gt/zebra/a.png"), 5, 6);
        let err = load_dataset(&dir.path().join("img"), Some(&dir.path().join("gt"))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
