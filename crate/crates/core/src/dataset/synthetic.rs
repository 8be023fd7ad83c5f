//! Procedural desk-scale dataset.
//!
//! Each image is a textured background with one elliptical foreground object,
//! each region painted from its own random palette. The foreground is degraded
//! at strength `s` and the label is `mos = 5 − 4s`. The background gets an
//! independent distortion of its own, so the label can only be read off the
//! right pixels: foreground palettes are on average more saturated (a local
//! cue that only partly separates the regions), and the foreground is always
//! the smaller region (a cue that needs the whole image).

use super::{DatasetError, DatasetRecord};
use crate::image::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f32::consts::PI;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distortion {
    Blur,
    Noise,
    Blocking,
}

impl Distortion {
    pub const ALL: [Distortion; 3] = [Distortion::Blur, Distortion::Noise, Distortion::Blocking];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    /// Range of the foreground's share of the image area.
    pub foreground_area: (f64, f64),
    /// Saturation ranges of the foreground and background palettes.
    pub foreground_saturation: (f32, f32),
    pub background_saturation: (f32, f32),
    /// Distort the background with an independent strength.
    pub background_distortion: bool,
    /// Largest Gaussian blur sigma (pixels) at `s = 1`.
    pub max_blur_sigma: f32,
    /// Largest additive noise std at `s = 1`.
    pub max_noise_std: f32,
    /// Block size of the JPEG-like blocking distortion.
    pub block: usize,
    /// Apply blur, noise and blocking together instead of one drawn type.
    pub compound: bool,
    /// Distortion types drawn from when not compound.
    pub kinds: Vec<Distortion>,
    /// Draw the foreground strength from `Beta(a, a)` instead of uniformly,
    /// which concentrates labels around the middle of the MOS range.
    pub strength_beta: Option<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            foreground_area: (0.15, 0.35),
            foreground_saturation: (0.35, 1.0),
            background_saturation: (0.0, 0.65),
            background_distortion: true,
            max_blur_sigma: 2.0,
            max_noise_std: 0.2,
            block: 8,
            compound: false,
            kinds: Distortion::ALL.to_vec(),
            strength_beta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image_id: String,
    pub image: ImageTensor,
    pub mos: f64,
    /// Foreground distortion strength `s`.
    pub strength: f64,
    pub distortion: Distortion,
    pub background_strength: f64,
    pub background_distortion: Distortion,
    /// Row-major foreground mask.
    pub foreground: Vec<bool>,
}

impl SyntheticSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.foreground.iter().filter(|&&f| f).count() as f64 / self.foreground.len() as f64
    }
}

pub fn mos_for_strength(s: f64) -> f64 {
    5.0 - 4.0 * s
}

/// `n` samples with the default configuration.
pub fn make_synthetic_dataset(n: usize, seed: u64) -> Result<Vec<SyntheticSample>, DatasetError> {
    make_synthetic_with(&SyntheticConfig::default(), n, seed)
}

pub fn make_synthetic_with(
    cfg: &SyntheticConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>, DatasetError> {
    if n < 8 {
        return Err(DatasetError::TooFew { len: n, min: 8 });
    }
    let beta = match cfg.strength_beta {
        Some(a) => Some(Beta::new(a, a).map_err(|e| DatasetError::Config(e.to_string()))?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let s = match &beta {
                Some(b) => b.sample(&mut rng),
                None => rng.random::<f64>(),
            };
            let mut sample = render_sample(cfg, s, &mut rng);
            sample.image_id = format!("syn_{seed}_{i:05}");
            sample
        })
        .collect())
}

/// Draws one image whose foreground is degraded at strength `s`.
pub fn render_sample(cfg: &SyntheticConfig, s: f64, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let (w, h) = (cfg.width, cfg.height);
    let (fs, bs) = (cfg.foreground_saturation, cfg.background_saturation);
    let fg_palette = Palette::random(rng, fs.0..fs.1);
    let bg_palette = Palette::random(rng, bs.0..bs.1);
    let fg_tex = Texture::random(rng);
    let bg_tex = Texture::random(rng);

    let area = rng.random_range(cfg.foreground_area.0..=cfg.foreground_area.1);
    let aspect: f64 = rng.random_range(0.75..1.33);
    let r = (area * (w * h) as f64 / std::f64::consts::PI).sqrt();
    let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
    let cx = rng.random_range(0.3..0.7) * w as f64;
    let cy = rng.random_range(0.3..0.7) * h as f64;
    let foreground: Vec<bool> = (0..h)
        .flat_map(|y| {
            (0..w).map(move |x| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            })
        })
        .collect();

    let clean = ImageTensor::from_fn(w, h, |x, y, c| {
        if foreground[y * w + x] {
            fg_palette.at(fg_tex.at(x, y), c)
        } else {
            bg_palette.at(bg_tex.at(x, y), c)
        }
    });

    let distortion = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    let background_distortion = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    let background_strength = if cfg.background_distortion {
        rng.random::<f64>()
    } else {
        0.0
    };
    let fg = distort(&clean, distortion, s as f32, cfg, rng);
    let bg = distort(&clean, background_distortion, background_strength as f32, cfg, rng);
    let image = ImageTensor::from_fn(w, h, |x, y, c| {
        if foreground[y * w + x] {
            fg.get(x, y, c)
        } else {
            bg.get(x, y, c)
        }
    })
    .quantized();

    SyntheticSample {
        image_id: String::new(),
        image,
        mos: mos_for_strength(s),
        strength: s,
        distortion,
        background_strength,
        background_distortion,
        foreground,
    }
}

/// Writes each sample as an 8-bit PNG plus `manifest.csv` under `dir`.
pub fn write_synthetic(
    dir: &Path,
    samples: &[SyntheticSample],
) -> Result<Vec<DatasetRecord>, DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let path = dir.join(format!("{}.png", s.image_id));
        s.image.save_png(&path)?;
        records.push(DatasetRecord::new(path, s.mos));
    }
    super::write_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(records)
}

/// Two colours blended by the texture value.
struct Palette {
    dark: [f32; 3],
    light: [f32; 3],
}

impl Palette {
    fn random(rng: &mut ChaCha8Rng, saturation: std::ops::Range<f32>) -> Self {
        let hue = rng.random::<f32>();
        let sat = rng.random_range(saturation);
        let hue2 = (hue + rng.random_range(-0.08..0.08)).rem_euclid(1.0);
        Self {
            dark: hsv(hue, sat, rng.random_range(0.15..0.45)),
            light: hsv(hue2, sat, rng.random_range(0.6..0.95)),
        }
    }

    fn at(&self, t: f32, c: usize) -> f32 {
        self.dark[c] * (1.0 - t) + self.light[c] * t
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let k = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Sum of oriented sinusoids, mapped into `[0, 1]`.
struct Texture {
    waves: Vec<(f32, f32, f32, f32)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let freq = rng.random_range(0.5..1.4);
                (
                    freq * theta.cos(),
                    freq * theta.sin(),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let total: f32 = self.waves.iter().map(|w| w.3).sum();
        let v: f32 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * x as f32 + fy * y as f32 + ph).sin())
            .sum();
        0.5 + 0.5 * v / total
    }
}

fn distort(
    img: &ImageTensor,
    kind: Distortion,
    s: f32,
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    // Draw the noise field unconditionally so the stream does not depend on `s`.
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let noise: Vec<f32> = if cfg.compound || kind == Distortion::Noise {
        (0..img.data().len()).map(|_| normal.sample(rng)).collect()
    } else {
        Vec::new()
    };
    if s <= 0.0 {
        return img.clone();
    }
    if cfg.compound {
        let blurred = gaussian_blur(img, cfg.max_blur_sigma * s);
        let std = cfg.max_noise_std * s;
        let noisy: Vec<f32> = blurred
            .data()
            .iter()
            .zip(&noise)
            .map(|(v, n)| v + std * n)
            .collect();
        let noisy = ImageTensor::new(img.width(), img.height(), noisy).expect("same dims");
        return blocking(&noisy, cfg.block, s);
    }
    match kind {
        Distortion::Blur => gaussian_blur(img, cfg.max_blur_sigma * s),
        Distortion::Noise => {
            let std = cfg.max_noise_std * s;
            let data = img.data().iter().zip(&noise).map(|(v, n)| v + std * n).collect();
            ImageTensor::new(img.width(), img.height(), data).expect("same dims")
        }
        Distortion::Blocking => blocking(img, cfg.block, s),
    }
}

fn gaussian_blur(img: &ImageTensor, sigma: f32) -> ImageTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let clampi = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let horiz = ImageTensor::from_fn(img.width(), img.height(), |x, y, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| wgt * img.get(clampi(x as isize + k as isize - radius, w), y, c))
            .sum::<f32>()
            / norm
    });
    ImageTensor::from_fn(img.width(), img.height(), |x, y, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| wgt * horiz.get(x, clampi(y as isize + k as isize - radius, h), c))
            .sum::<f32>()
            / norm
    })
}

/// Blends each pixel towards its block mean, as coarse quantisation would.
fn blocking(img: &ImageTensor, block: usize, s: f32) -> ImageTensor {
    let (w, h) = (img.width(), img.height());
    let bw = w.div_ceil(block);
    let bh = h.div_ceil(block);
    let mut means = vec![0.0f32; 3 * bw * bh];
    let mut counts = vec![0.0f32; bw * bh];
    for y in 0..h {
        for x in 0..w {
            let b = (y / block) * bw + x / block;
            counts[b] += 1.0;
            for c in 0..3 {
                means[c * bw * bh + b] += img.get(x, y, c);
            }
        }
    }
    ImageTensor::from_fn(w, h, |x, y, c| {
        let b = (y / block) * bw + x / block;
        let m = means[c * bw * bh + b] / counts[b];
        (1.0 - s) * img.get(x, y, c) + s * m
    })
}
