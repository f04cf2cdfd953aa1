//! Patch sampling for training and per-image patch groups for inference.

use crate::error::{Error, Result};
use crate::image::{write_patch_chw, PixelSource};
use crate::norm::GroupLayout;
use crate::real::Real;
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

/// Patches stacked along the batch axis, with their grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T = f32> {
    pub data: Tensor<T>,
    pub layout: GroupLayout,
    /// Source image of every patch.
    pub sources: Vec<usize>,
}

/// How inference crops are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CropMode {
    #[default]
    Random,
    /// Non-overlapping grid tiles in row-major order, topped up with random
    /// crops when more patches than tiles are requested.
    Tiled,
}

impl<T: Real> PatchBatch<T> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Source image of group `g`.
    pub fn group_source(&self, g: usize) -> usize {
        self.sources[g * self.layout.group_size()]
    }

    /// Stacks single-image groups of equal size into one multi-group batch.
    pub fn concat(groups: &[PatchBatch<T>]) -> Result<Self> {
        let first = groups.first().ok_or(Error::Empty("patch_batch_concat"))?;
        let size = first.layout.group_size();
        let mut count = 0;
        let mut sources = Vec::new();
        for g in groups {
            if g.layout.group_size() != size {
                return Err(Error::shape(
                    "patch_batch_concat",
                    format!("group sizes {} and {} differ", size, g.layout.group_size()),
                ));
            }
            count += g.layout.group_count();
            sources.extend_from_slice(&g.sources);
        }
        let parts: Vec<&Tensor<T>> = groups.iter().map(|g| &g.data).collect();
        Ok(PatchBatch {
            data: Tensor::concat_batch(&parts)?,
            layout: GroupLayout::new(size, count)?,
            sources,
        })
    }
}

fn check_size<S: PixelSource + ?Sized>(img: &S, patch: usize, op: &'static str) -> Result<()> {
    if patch == 0 || img.width() < patch || img.height() < patch {
        return Err(Error::shape(
            op,
            format!("image {}×{} smaller than patch {}", img.width(), img.height(), patch),
        ));
    }
    Ok(())
}

fn random_corner<S: PixelSource + ?Sized, R: Rng + ?Sized>(img: &S, patch: usize, rng: &mut R) -> (usize, usize) {
    let x = rng.random_range(0..=img.width() - patch);
    let y = rng.random_range(0..=img.height() - patch);
    (x, y)
}

/// `patches_per_image` uniform random crops (with replacement) from every
/// image, pooled into one normalization group.
pub fn sample_train_patches<T: Real, S: PixelSource, R: Rng + ?Sized>(
    images: &[&S],
    patches_per_image: usize,
    patch: usize,
    rng: &mut R,
) -> Result<PatchBatch<T>> {
    let total = images.len() * patches_per_image;
    if total == 0 {
        return Err(Error::Empty("sample_train_patches"));
    }
    for img in images {
        check_size(*img, patch, "sample_train_patches")?;
    }
    let per = 3 * patch * patch;
    let mut data = vec![T::zero(); total * per];
    let mut sources = Vec::with_capacity(total);
    let mut slot = 0;
    for (i, img) in images.iter().enumerate() {
        for _ in 0..patches_per_image {
            let (x, y) = random_corner(*img, patch, rng);
            write_patch_chw(*img, x, y, patch, &mut data[slot * per..(slot + 1) * per]);
            sources.push(i);
            slot += 1;
        }
    }
    Ok(PatchBatch {
        data: Tensor::new(&[total, 3, patch, patch], data)?,
        layout: GroupLayout::single(total)?,
        sources,
    })
}

/// Corners of the non-overlapping grid tiles, row-major.
pub fn tile_corners(width: usize, height: usize, patch: usize) -> Vec<(usize, usize)> {
    if patch == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for ty in 0..height / patch {
        for tx in 0..width / patch {
            out.push((tx * patch, ty * patch));
        }
    }
    out
}

/// One group of `n_patches` crops of a single image, tagged with `source`.
pub fn make_inference_group<T: Real, S: PixelSource + ?Sized, R: Rng + ?Sized>(
    img: &S,
    source: usize,
    n_patches: usize,
    patch: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<PatchBatch<T>> {
    if n_patches == 0 {
        return Err(Error::Empty("make_inference_group"));
    }
    check_size(img, patch, "make_inference_group")?;
    let mut corners: Vec<(usize, usize)> = match mode {
        CropMode::Random => Vec::new(),
        CropMode::Tiled => tile_corners(img.width(), img.height(), patch),
    };
    corners.truncate(n_patches);
    while corners.len() < n_patches {
        corners.push(random_corner(img, patch, rng));
    }
    let per = 3 * patch * patch;
    let mut data = vec![T::zero(); n_patches * per];
    for (i, &(x, y)) in corners.iter().enumerate() {
        write_patch_chw(img, x, y, patch, &mut data[i * per..(i + 1) * per]);
    }
    Ok(PatchBatch {
        data: Tensor::new(&[n_patches, 3, patch, patch], data)?,
        layout: GroupLayout::new(n_patches, 1)?,
        sources: vec![source; n_patches],
    })
}

/// `1 − mean(realness)`: higher means more out-of-distribution.
pub fn image_anomaly_score<T: Real>(realness: &[T]) -> Result<f64> {
    if realness.is_empty() {
        return Err(Error::Empty("image_anomaly_score"));
    }
    let mean = realness.iter().map(|v| v.as_f64()).sum::<f64>() / realness.len() as f64;
    Ok(1.0 - mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::rng::rng_from_seed;

    fn ramp(size: usize) -> Image {
        Image::from_fn(size, size, |x, y, c| ((x * 3 + y * 5 + c) % 17) as f32 / 16.0)
    }

    #[test]
    fn whole_image_patch() {
        let img = ramp(8);
        let b: PatchBatch<f32> = sample_train_patches(&[&img], 3, 8, &mut rng_from_seed(0)).unwrap();
        let mut want = vec![0.0f32; 192];
        write_patch_chw(&img, 0, 0, 8, &mut want);
        for i in 0..3 {
            assert_eq!(&b.data.data()[i * 192..(i + 1) * 192], &want[..]);
        }
    }

    #[test]
    fn corners_cover_full_range() {
        let img = Image::filled(256, 256, [0.0; 3]);
        let mut rng = rng_from_seed(1);
        let (mut lo, mut hi) = (usize::MAX, 0);
        for _ in 0..20000 {
            let (x, y) = random_corner(&img, 64, &mut rng);
            lo = lo.min(x).min(y);
            hi = hi.max(x).max(y);
        }
        assert_eq!((lo, hi), (0, 192));
    }

    #[test]
    fn sampling_is_seed_deterministic_and_layout_is_single_group() {
        let (a, b) = (ramp(16), ramp(20));
        let s1: PatchBatch<f32> = sample_train_patches(&[&a, &b], 4, 8, &mut rng_from_seed(3)).unwrap();
        let s2: PatchBatch<f32> = sample_train_patches(&[&a, &b], 4, 8, &mut rng_from_seed(3)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.layout, GroupLayout::new(8, 1).unwrap());
        assert_eq!(s1.sources, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let small = ramp(4);
        assert!(sample_train_patches::<f32, _, _>(&[&small], 1, 8, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn inference_groups_concatenate() {
        let (a, b) = (ramp(16), ramp(16));
        let mut rng = rng_from_seed(5);
        let ga: PatchBatch<f32> = make_inference_group(&a, 0, 4, 8, CropMode::Random, &mut rng).unwrap();
        let gb: PatchBatch<f32> = make_inference_group(&b, 1, 4, 8, CropMode::Random, &mut rng).unwrap();
        let both = PatchBatch::concat(&[ga.clone(), gb]).unwrap();
        assert_eq!(both.layout, GroupLayout::new(4, 2).unwrap());
        assert_eq!((both.group_source(0), both.group_source(1)), (0, 1));
        assert_eq!(both.data.slice_batch(0, 4).unwrap(), ga.data);
    }

    #[test]
    fn tiled_mode_uses_grid_first() {
        assert_eq!(tile_corners(256, 256, 64).len(), 16);
        let img = ramp(16);
        let g: PatchBatch<f32> = make_inference_group(&img, 0, 6, 8, CropMode::Tiled, &mut rng_from_seed(0)).unwrap();
        let mut want = vec![0.0f32; 192];
        write_patch_chw(&img, 8, 8, 8, &mut want);
        assert_eq!(&g.data.data()[3 * 192..4 * 192], &want[..]);
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn anomaly_score_examples() {
        assert!((image_anomaly_score(&[0.2f64, 0.4, 0.6]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(image_anomaly_score(&[1.0f32; 4]).unwrap(), 0.0);
        assert!(image_anomaly_score::<f32>(&[]).is_err());
    }
}
