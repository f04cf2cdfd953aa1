//! Severity-graded image corruptions.
//!
//! Severity tables (values at severities 1..=5, on `[0, 1]` pixels):
//!
//! | kind            | parameter                     | 1    | 2    | 3    | 4    | 5    |
//! |-----------------|-------------------------------|------|------|------|------|------|
//! | gaussian_noise  | noise σ                       | 0.08 | 0.12 | 0.18 | 0.26 | 0.38 |
//! | shot_noise      | photons per unit intensity    | 60   | 25   | 12   | 5    | 3    |
//! | impulse_noise   | salt-and-pepper fraction      | 0.03 | 0.06 | 0.09 | 0.17 | 0.27 |
//! | gaussian_blur   | kernel σ (px)                 | 1    | 2    | 3    | 4    | 6    |
//! | defocus_blur    | disk radius (px)              | 3    | 4    | 6    | 8    | 10   |
//! | contrast        | factor towards channel mean   | 0.4  | 0.3  | 0.2  | 0.1  | 0.05 |
//! | brightness      | added to HSV value            | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
//! | saturate        | HSV saturation multiplier     | 2    | 3    | 5    | 8    | 12   |
//! | pixelate        | block size (px)               | 2    | 3    | 4    | 6    | 8    |
//!
//! These are calibration constants owned by this crate.

use crate::error::{Error, Result};
use crate::image::{Image, PixelSource};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    DefocusBlur,
    Contrast,
    Brightness,
    Saturate,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 9] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Saturate,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Saturate => "saturate",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Parameter values for severities 1..=5.
    pub fn table(&self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            CorruptionKind::GaussianBlur => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionKind::DefocusBlur => [3.0, 4.0, 6.0, 8.0, 10.0],
            CorruptionKind::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Saturate => [2.0, 3.0, 5.0, 8.0, 12.0],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
        }
    }

    /// Distortion magnitude of a parameter value; strictly increasing in
    /// severity for every kind.
    pub fn magnitude(&self, param: f64) -> f64 {
        match self {
            CorruptionKind::ShotNoise => 1.0 / param,
            CorruptionKind::Contrast => 1.0 - param,
            _ => param,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::param("corruption", format!("unknown kind {:?}", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::param("corruption", format!("severity {} outside 1..=5", severity)));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    pub fn param(&self) -> f64 {
        self.kind.table()[self.severity as usize - 1]
    }

    /// `kind-severity`, e.g. `gaussian_noise-3`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.kind.name(), self.severity)
    }
}

/// Applies `spec` to an image in `[0, 1]`; the result is clipped to `[0, 1]`.
pub fn apply_corruption<R: Rng + ?Sized>(img: &Image, spec: CorruptionSpec, rng: &mut R) -> Result<Image> {
    apply_with_param(img, spec.kind, spec.param(), rng)
}

/// Applies a corruption with an explicit parameter value.
pub fn apply_with_param<R: Rng + ?Sized>(img: &Image, kind: CorruptionKind, param: f64, rng: &mut R) -> Result<Image> {
    if !param.is_finite() || param < 0.0 {
        return Err(Error::param("corruption", format!("{} parameter {} invalid", kind, param)));
    }
    let mut out = match kind {
        CorruptionKind::GaussianNoise => gaussian_noise(img, param, rng)?,
        CorruptionKind::ShotNoise => shot_noise(img, param, rng)?,
        CorruptionKind::ImpulseNoise => impulse_noise(img, param, rng),
        CorruptionKind::GaussianBlur => gaussian_blur(img, param),
        CorruptionKind::DefocusBlur => defocus_blur(img, param),
        CorruptionKind::Contrast => contrast(img, param),
        CorruptionKind::Brightness => map_hsv(img, |h| [h[0], h[1], h[2] + param as f32]),
        CorruptionKind::Saturate => map_hsv(img, |h| [h[0], h[1] * param as f32, h[2]]),
        CorruptionKind::Pixelate => pixelate(img, libm::round(param) as usize),
    };
    out.clamp01();
    Ok(out)
}

fn gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param("gaussian_noise", format!("{}", e)))?;
    for v in out.data_mut() {
        *v += normal.sample(rng) as f32;
    }
    Ok(out)
}

fn shot_noise<R: Rng + ?Sized>(img: &Image, photons: f64, rng: &mut R) -> Result<Image> {
    if photons <= 0.0 {
        return Err(Error::param("shot_noise", format!("photon count {} must be positive", photons)));
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let lambda = (*v as f64).max(0.0) * photons;
        let k = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::param("shot_noise", format!("{}", e)))?
                .sample(rng)
        } else {
            0.0
        };
        *v = (k / photons) as f32;
    }
    Ok(out)
}

fn impulse_noise<R: Rng + ?Sized>(img: &Image, amount: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        if rng.random::<f64>() < amount {
            *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Convolves every channel with a separable kernel, clamping at the edges.
fn separable(img: &Image, kernel: &[f32]) -> Image {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0f32;
                for (i, &k) in kernel.iter().enumerate() {
                    s += k * img.get(clampi(x as isize + i as isize - r, w), y, c);
                }
                tmp.set(x, y, c, s);
            }
        }
    }
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0f32;
                for (i, &k) in kernel.iter().enumerate() {
                    s += k * tmp.get(x, clampi(y as isize + i as isize - r, h), c);
                }
                out.set(x, y, c, s);
            }
        }
    }
    out
}

/// Normalized Gaussian taps truncated at radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = libm::ceil(3.0 * sigma) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    separable(img, &gaussian_kernel(sigma))
}

/// Offsets inside a disk of the given radius.
pub fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = libm::floor(radius) as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn defocus_blur(img: &Image, radius: f64) -> Image {
    let taps = disk_offsets(radius);
    let wgt = 1.0 / taps.len() as f32;
    let (w, h) = (img.width(), img.height());
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for &(dx, dy) in &taps {
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += img.get(sx, sy, c);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(x, y, c, a * wgt);
            }
        }
    }
    out
}

/// `(x − mean_c)·factor + mean_c` with the per-channel image mean.
fn contrast(img: &Image, factor: f64) -> Image {
    let n = (img.width() * img.height()).max(1) as f64;
    let mut mean = [0.0f64; 3];
    for px in img.data().chunks(3) {
        for c in 0..3 {
            mean[c] += px[c] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        for c in 0..3 {
            px[c] = ((px[c] as f64 - mean[c]) * factor + mean[c]) as f32;
        }
    }
    out
}

fn pixelate(img: &Image, block: usize) -> Image {
    let block = block.max(1);
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ex, ey) = ((bx + block).min(w), (by + block).min(h));
            let count = ((ex - bx) * (ey - by)) as f32;
            let mut acc = [0.0f32; 3];
            for y in by..ey {
                for x in bx..ex {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += img.get(x, y, c);
                    }
                }
            }
            for y in by..ey {
                for x in bx..ex {
                    for (c, a) in acc.iter().enumerate() {
                        out.set(x, y, c, a / count);
                    }
                }
            }
        }
    }
    out
}

fn wrap(x: f32, m: f32) -> f32 {
    x - m * libm::floorf(x / m)
}

pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        wrap((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let h6 = wrap(h, 1.0) * 6.0;
    let i = libm::floorf(h6);
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn map_hsv(img: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        let hsv = f(rgb_to_hsv([px[0], px[1], px[2]]));
        let clipped = [hsv[0], hsv[1].clamp(0.0, 1.0), hsv[2].clamp(0.0, 1.0)];
        px.copy_from_slice(&hsv_to_rgb(clipped));
    }
    out
}

/// Mean squared difference between two images of equal size.
pub fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / n
}
