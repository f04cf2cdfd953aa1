//! RGB images, resampling and conversion to network input.

use crate::error::{Error, Result};
use crate::real::Real;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Side length every image is standardized to before patching.
pub const STANDARD_SIZE: usize = 256;

/// Read access to an interleaved 3-channel image with values in `[0, 1]`.
pub trait PixelSource {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Channel `c` of pixel `(x, y)` in `[0, 1]`.
    fn value(&self, x: usize, y: usize, c: usize) -> f32;
}

/// 8-bit interleaved RGB, the compact storage format for datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "rgb8",
                format!("{}×{}×3 needs {} bytes, got {}", width, height, width * height * 3, data.len()),
            ));
        }
        Ok(Rgb8 { width, height, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

impl PixelSource for Rgb8 {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn value(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c] as f32 / 255.0
    }
}

/// Floating-point interleaved RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{}×{}×3 needs {} values, got {}", width, height, width * height * 3, data.len()),
            ));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Image { width, height, data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Rounds to 8 bits after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Rgb8 {
        Rgb8 {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8)
                .collect(),
        }
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Empty("resize"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (libm::floor(src) as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, (src - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = axis(width, self.width);
        let ys = axis(height, self.height);
        let mut out = vec![0.0f32; width * height * 3];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
                    let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
                    out[(oy * width + ox) * 3 + c] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Image::new(width, height, out)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(
                "crop",
                format!(
                    "window {}×{} at ({}, {}) exceeds {}×{}",
                    width, height, x0, y0, self.width, self.height
                ),
            ));
        }
        Ok(Image::from_fn(width, height, |x, y, c| self.get(x0 + x, y0 + y, c)))
    }

    /// Resizes so the short side is `size`, then center-crops to `size × size`.
    pub fn standardize(&self, size: usize) -> Result<Image> {
        let short = self.width.min(self.height);
        if short == 0 {
            return Err(Error::Empty("standardize"));
        }
        let w = libm::round((self.width * size) as f64 / short as f64).max(size as f64) as usize;
        let h = libm::round((self.height * size) as f64 / short as f64).max(size as f64) as usize;
        let r = self.resize(w, h)?;
        r.crop((w - size) / 2, (h - size) / 2, size, size)
    }
}

impl PixelSource for Image {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn value(&self, x: usize, y: usize, c: usize) -> f32 {
        self.get(x, y, c)
    }
}

/// Writes the `size × size` window at `(x0, y0)` as planar CHW values
/// mapped from `[0, 1]` to `[−1, 1]`.
pub fn write_patch_chw<T: Real, S: PixelSource + ?Sized>(src: &S, x0: usize, y0: usize, size: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), 3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = src.value(x0 + x, y0 + y, c) * 2.0 - 1.0;
                out[(c * size + y) * size + x] = T::from_f64_lossy(v as f64);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let bytes: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let img = Rgb8::new(4, 4, bytes.clone()).unwrap();
        assert_eq!(img.to_image().to_rgb8().data(), &bytes[..]);
        assert!(Rgb8::new(4, 4, vec![0; 47]).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(5, 3, |x, y, c| (x + 2 * y + c) as f32 / 20.0);
        assert_eq!(img.resize(5, 3).unwrap(), img);
        let flat = Image::filled(7, 9, [0.25, 0.5, 0.75]);
        let r = flat.resize(3, 4).unwrap();
        assert!(r.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = Image::from_fn(4, 1, |x, _, _| x as f32);
        let r = img.resize(2, 1).unwrap();
        assert_eq!(r.get(0, 0, 0), 0.5);
        assert_eq!(r.get(1, 0, 0), 2.5);
    }

    #[test]
    fn standardize_produces_square() {
        let img = Image::from_fn(300, 200, |x, y, _| ((x + y) % 7) as f32 / 7.0);
        let s = img.standardize(64).unwrap();
        assert_eq!((s.width, s.height), (64, 64));
    }

    #[test]
    fn patch_values_are_signed() {
        let img = Image::from_fn(2, 2, |x, _, c| if c == 0 { x as f32 } else { 0.5 });
        let mut out = vec![0.0f32; 12];
        write_patch_chw(&img, 0, 0, 2, &mut out);
        assert_eq!(&out[..4], &[-1.0, 1.0, -1.0, 1.0]);
        assert!(out[4..].iter().all(|&v| v == 0.0));
    }
}
