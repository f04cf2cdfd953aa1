//! Procedural in-distribution images: Gaussian random fields with a fixed
//! power-law spectrum, tinted per image, with a few flat-colored shapes on top.

use crate::codec::save_image;
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, ManifestRow};
use discopatch_core::rng::{derive_seed, normal_vec, rng_from_seed, DetRng};
use discopatch_core::{Image, Rgb8};
use rand::Rng;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use std::path::Path;
use std::sync::Arc;

/// Side length of generated images.
pub const SYNTH_SIZE: usize = 256;
/// Amplitude falls off as `1 / |f|^SPECTRAL_SLOPE` (power as its square).
pub const SPECTRAL_SLOPE: f32 = 1.25;

/// Reusable FFT plans for one image size.
pub struct FieldGenerator {
    size: usize,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
    amplitude: Vec<f32>,
}

impl FieldGenerator {
    pub fn new(size: usize) -> Self {
        Self::with_slope(size, SPECTRAL_SLOPE)
    }

    /// Fields whose amplitude spectrum falls off as `1 / |f|^slope`.
    pub fn with_slope(size: usize, slope: f32) -> Self {
        let mut planner = FftPlanner::new();
        let freq = |i: usize| {
            let k = if i <= size / 2 { i as f32 } else { i as f32 - size as f32 };
            k / size as f32
        };
        let mut amplitude = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let f = (freq(x).powi(2) + freq(y).powi(2)).sqrt();
                // The DC term is dropped; fields are standardized afterwards.
                amplitude[y * size + x] = if f == 0.0 { 0.0 } else { f.powf(-slope) };
            }
        }
        FieldGenerator {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
            amplitude,
        }
    }

    fn fft2(&self, buf: &mut [Complex32], fft: &Arc<dyn Fft<f32>>) {
        let n = self.size;
        fft.process(buf);
        let mut t = vec![Complex32::default(); n * n];
        for y in 0..n {
            for x in 0..n {
                t[x * n + y] = buf[y * n + x];
            }
        }
        fft.process(&mut t);
        for y in 0..n {
            for x in 0..n {
                buf[y * n + x] = t[x * n + y];
            }
        }
    }

    /// A zero-mean, unit-variance field.
    pub fn field(&self, rng: &mut DetRng) -> Vec<f32> {
        let n = self.size;
        let noise: Vec<f32> = normal_vec(rng, n * n);
        let mut buf: Vec<Complex32> = noise.into_iter().map(|v| Complex32::new(v, 0.0)).collect();
        self.fft2(&mut buf, &self.forward);
        buf.iter_mut().zip(&self.amplitude).for_each(|(c, a)| *c *= *a);
        self.fft2(&mut buf, &self.inverse);
        let re: Vec<f32> = buf.iter().map(|c| c.re).collect();
        let mean = re.iter().sum::<f32>() / re.len() as f32;
        let var = re.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / re.len() as f32;
        let inv = 1.0 / var.sqrt().max(1e-12);
        re.into_iter().map(|v| (v - mean) * inv).collect()
    }

    /// Image `index` of the family drawn with `seed`.
    pub fn image(&self, seed: u64, index: u64) -> Rgb8 {
        let n = self.size;
        let mut rng = rng_from_seed(derive_seed(seed, &index.to_le_bytes()));
        let fields = [self.field(&mut rng), self.field(&mut rng)];
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
        // Each channel mixes a shared luminance field and a chroma field.
        let mix: [[f32; 2]; 3] = std::array::from_fn(|_| [rng.random_range(0.08..0.16), rng.random_range(-0.06..0.06)]);
        let mut img = Image::from_fn(n, n, |x, y, c| {
            let i = y * n + x;
            base[c] + mix[c][0] * fields[0][i] + mix[c][1] * fields[1][i]
        });
        let shapes = rng.random_range(2..=6);
        for _ in 0..shapes {
            draw_shape(&mut img, &mut rng);
        }
        img.clamp01();
        img.to_rgb8()
    }
}

fn draw_shape(img: &mut Image, rng: &mut DetRng) {
    use discopatch_core::PixelSource;
    let n = img.width() as f32;
    let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let cx = rng.random_range(0.0..n);
    let cy = rng.random_range(0.0..n);
    let r = rng.random_range(n * 0.04..n * 0.15);
    let circle = rng.random_bool(0.5);
    let aspect = rng.random_range(0.5..2.0f32);
    let inside = |x: f32, y: f32| {
        let (dx, dy) = (x - cx, y - cy);
        if circle {
            dx * dx + dy * dy <= r * r
        } else {
            dx.abs() <= r * aspect && dy.abs() <= r / aspect
        }
    };
    let size = img.width();
    for y in 0..size {
        for x in 0..size {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                for (c, &v) in color.iter().enumerate() {
                    img.set(x, y, c, v);
                }
            }
        }
    }
}

/// In-memory draw of `n` images.
pub fn synth_images(n: usize, seed: u64) -> Vec<Rgb8> {
    let g = FieldGenerator::new(SYNTH_SIZE);
    (0..n as u64).map(|i| g.image(seed, i)).collect()
}

pub fn synth_file_name(index: usize) -> String {
    format!("synth_{:05}.png", index)
}

/// Writes `n` PNG images and `manifest.csv` into `out_dir`.
pub fn synth_dataset(out_dir: &Path, n: usize, seed: u64) -> Result<Vec<ManifestRow>> {
    if n == 0 {
        return Err(Error::Usage("synth: --n must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let g = FieldGenerator::new(SYNTH_SIZE);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let name = synth_file_name(i);
        save_image(&g.image(seed, i as u64), &out_dir.join(&name))?;
        rows.push(ManifestRow {
            path: name,
            kind: "clean".into(),
            severity: 0,
            source: format!("synth:{}:{}", seed, i),
        });
    }
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

/// Histogram of all channel values of `images`.
pub fn value_histogram<'a>(images: impl IntoIterator<Item = &'a Rgb8>) -> [u64; 256] {
    let mut h = [0u64; 256];
    for img in images {
        img.data().iter().for_each(|&b| h[b as usize] += 1);
    }
    h
}

/// Kolmogorov-Smirnov distance between two histograms over the same bins.
pub fn ks_distance(a: &[u64; 256], b: &[u64; 256]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (mut ca, mut cb, mut worst) = (0u64, 0u64, 0.0f64);
    for i in 0..256 {
        ca += a[i];
        cb += b[i];
        worst = worst.max((ca as f64 / na - cb as f64 / nb).abs());
    }
    worst
}
