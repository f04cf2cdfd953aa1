//! Image folders.

use crate::codec::{load_image, Format};
use crate::error::{Error, Result};
use discopatch_core::{PixelSource, Rgb8};
use std::path::{Path, PathBuf};

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && Format::from_path(&path).is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Decoded images standardized to a common square size.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// File names, used as per-image keys for seeding.
    pub keys: Vec<String>,
    pub images: Vec<Rgb8>,
    /// Files that failed to decode, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn items(&self) -> Vec<(&str, &Rgb8)> {
        self.keys.iter().map(String::as_str).zip(&self.images).collect()
    }

    pub fn refs(&self) -> Vec<&Rgb8> {
        self.images.iter().collect()
    }

    pub fn from_images(prefix: &str, images: Vec<Rgb8>) -> Self {
        Dataset {
            keys: (0..images.len()).map(|i| format!("{}{:05}", prefix, i)).collect(),
            images,
            skipped: Vec::new(),
        }
    }
}

/// Brings an image to `size × size` (short side resize, center crop).
pub fn standardize(img: Rgb8, size: usize) -> Result<Rgb8> {
    if img.width() == size && img.height() == size {
        return Ok(img);
    }
    Ok(img.to_image().standardize(size)?.to_rgb8())
}

/// Loads every image in `dir`. Unreadable files are skipped with a warning on
/// stderr; an empty result is an error.
pub fn load_dir(dir: &Path, size: usize) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for path in list_images(dir)? {
        match load_image(&path).and_then(|img| standardize(img, size)) {
            Ok(img) => {
                let key = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                ds.keys.push(key);
                ds.images.push(img);
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {}", path.display(), e);
                ds.skipped.push((path, e.to_string()));
            }
        }
    }
    if ds.is_empty() {
        return Err(Error::Usage(format!("no readable images in {}", dir.display())));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::save_image;

    #[test]
    fn loads_sorted_and_skips_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Rgb8::new(4, 2, (0..24).collect()).unwrap();
        save_image(&img, &dir.path().join("b.png")).unwrap();
        save_image(&img, &dir.path().join("a.ppm")).unwrap();
        std::fs::write(dir.path().join("c.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let ds = load_dir(dir.path(), 2).unwrap();
        assert_eq!(ds.keys, vec!["a.ppm", "b.png"]);
        assert_eq!(ds.skipped.len(), 1);
        assert!(ds.images.iter().all(|i| i.width() == 2 && i.height() == 2));
    }

    #[test]
    fn empty_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dir(dir.path(), 8).is_err());
    }

    #[test]
    fn right_sized_images_pass_through() {
        let img = Rgb8::new(2, 2, (0..12).collect()).unwrap();
        assert_eq!(standardize(img.clone(), 2).unwrap(), img);
    }
}
