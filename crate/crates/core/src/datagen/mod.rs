//! Synthetic multi-domain "real vs attack" images.
//!
//! Real samples show a shaded hemisphere (the stand-in face) over a textured
//! background. Attacks show the same scene re-photographed: shading contrast
//! is compressed toward its mean and a border artifact specific to the
//! domain's texture id is overlaid. Each domain then applies its own hue
//! rotation, brightness scale and sensor noise to both classes.

mod color;
mod io;

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use color::{rgb_to_hsv, rgb_to_hsv_pixel, with_hsv};
pub use io::{dataset_digest, load_dataset, save_dataset, MANIFEST_VERSION};

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Appearance shift applied to every image of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Hue rotation in degrees.
    pub hue_rotation: f64,
    pub brightness_scale: f64,
    /// Selects the background pattern and the attack border artifact.
    pub background_texture_id: u32,
    pub noise_sigma: f64,
}

impl DomainShift {
    pub fn identity(background_texture_id: u32) -> Self {
        DomainShift { hue_rotation: 0.0, brightness_scale: 1.0, background_texture_id, noise_sigma: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub shift: DomainShift,
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain `{}`: {m}", self.name)));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return bad("name must be non-empty and use only [A-Za-z0-9_-]".into());
        }
        if self.n_real == 0 || self.n_fake == 0 {
            return bad(format!("class counts must be positive (real {}, fake {})", self.n_real, self.n_fake));
        }
        let s = &self.shift;
        if !(s.brightness_scale > 0.0) || !s.brightness_scale.is_finite() {
            return bad(format!("brightness_scale must be positive, got {}", s.brightness_scale));
        }
        if !(s.noise_sigma >= 0.0) || !s.noise_sigma.is_finite() || !s.hue_rotation.is_finite() {
            return bad("noise_sigma must be >= 0 and all shifts finite".into());
        }
        Ok(())
    }
}

/// A full dataset description: image geometry plus its domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// `[channels, height, width]`; only 3-channel RGB is generated.
    #[serde(default = "default_image_shape")]
    pub image_shape: [usize; 3],
    #[serde(default = "default_depth_shape")]
    pub depth_shape: [usize; 2],
    pub domains: Vec<DomainSpec>,
}

fn default_image_shape() -> [usize; 3] {
    [3, 32, 32]
}

fn default_depth_shape() -> [usize; 2] {
    [8, 8]
}

impl Default for SynthSpec {
    /// Four domains with distinct textures, colour casts, exposure and noise.
    fn default() -> Self {
        let domain = |name: &str, hue, brightness, tex, noise, seed| DomainSpec {
            name: name.into(),
            shift: DomainShift {
                hue_rotation: hue,
                brightness_scale: brightness,
                background_texture_id: tex,
                noise_sigma: noise,
            },
            n_real: 150,
            n_fake: 150,
            seed,
        };
        SynthSpec {
            image_shape: default_image_shape(),
            depth_shape: default_depth_shape(),
            domains: vec![
                domain("studio", 0.0, 1.0, 0, 0.03, 101),
                domain("office", 30.0, 0.75, 1, 0.05, 202),
                domain("outdoor", -25.0, 1.25, 2, 0.04, 303),
                domain("kiosk", 60.0, 0.9, 3, 0.07, 404),
            ],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config(format!("need at least 2 domains, got {}", self.domains.len())));
        }
        if self.image_shape[0] != 3 || self.image_shape[1] < 4 || self.image_shape[2] < 4 {
            return Err(Error::Config(format!("image shape must be [3, h>=4, w>=4], got {:?}", self.image_shape)));
        }
        if self.depth_shape.contains(&0) {
            return Err(Error::Config(format!("depth shape must be positive, got {:?}", self.depth_shape)));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            d.validate()?;
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate domain name `{}`", d.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[c, h, w]` image in `[0, 1]`.
    pub x: NdArray,
    /// 1 for real, 0 for attack.
    pub y: u8,
    /// `[h_d, w_d]` depth target.
    pub depth: NdArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub image_shape: [usize; 3],
    pub depth_shape: [usize; 2],
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn count(&self, label: u8) -> usize {
        self.samples.iter().filter(|s| s.y == label).count()
    }

    /// Splits off the last `ceil(fraction * n_class)` samples of each class
    /// as a validation set, returning `(train, validation)`.
    pub fn split_validation(&self, fraction: f64) -> Result<(DomainDataset, DomainDataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction must be in [0, 1), got {fraction}")));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for label in [1u8, 0u8] {
            let class: Vec<&Sample> = self.samples.iter().filter(|s| s.y == label).collect();
            let n_val = (fraction * class.len() as f64).ceil() as usize;
            let cut = class.len() - n_val.min(class.len());
            train.extend(class[..cut].iter().map(|s| (*s).clone()));
            val.extend(class[cut..].iter().map(|s| (*s).clone()));
        }
        let with = |samples| DomainDataset { samples, ..self.clone_meta() };
        Ok((with(train), with(val)))
    }

    fn clone_meta(&self) -> DomainDataset {
        DomainDataset {
            spec: self.spec.clone(),
            image_shape: self.image_shape,
            depth_shape: self.depth_shape,
            samples: Vec::new(),
        }
    }

    /// Copy with every image extended from RGB to RGB+HSV.
    pub fn with_hsv(&self) -> Result<DomainDataset> {
        let [c, h, w] = self.image_shape;
        let mut out = DomainDataset { image_shape: [6, h, w], ..self.clone_meta() };
        for s in &self.samples {
            let x = with_hsv(&s.x.clone().reshaped(&[1, c, h, w])?)?.reshaped(&[6, h, w])?;
            out.samples.push(Sample { x, y: s.y, depth: s.depth.clone() });
        }
        Ok(out)
    }

    /// All samples as one batch, in stored order.
    pub fn full_batch(&self) -> Result<Batch> {
        Batch::from_samples(self.samples.iter(), self.image_shape, self.depth_shape)
    }
}

/// Stacked samples ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b, c, h, w]`
    pub x: NdArray,
    /// `[b]` labels as 0.0 / 1.0
    pub y: NdArray,
    /// `[b, 1, h_d, w_d]`
    pub depth: NdArray,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        image_shape: [usize; 3],
        depth_shape: [usize; 2],
    ) -> Result<Batch> {
        let (mut x, mut y, mut depth) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            x.extend_from_slice(s.x.data());
            y.push(f64::from(s.y));
            depth.extend_from_slice(s.depth.data());
        }
        let b = y.len();
        let [c, h, w] = image_shape;
        let [hd, wd] = depth_shape;
        Ok(Batch {
            x: NdArray::new(vec![b, c, h, w], x)?,
            y: NdArray::new(vec![b], y)?,
            depth: NdArray::new(vec![b, 1, hd, wd], depth)?,
        })
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let xs: Vec<&NdArray> = parts.iter().map(|b| &b.x).collect();
        let ys: Vec<&NdArray> = parts.iter().map(|b| &b.y).collect();
        let ds: Vec<&NdArray> = parts.iter().map(|b| &b.depth).collect();
        Ok(Batch { x: NdArray::stack(&xs, true)?, y: NdArray::stack(&ys, true)?, depth: NdArray::stack(&ds, true)? })
    }

    /// Replaces RGB inputs with RGB+HSV (six channels).
    pub fn with_hsv(mut self) -> Result<Batch> {
        self.x = with_hsv(&self.x)?;
        Ok(self)
    }
}

fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// Depth supervision: zeros for attacks, a centred Gaussian bump normalised
/// to `[0, 1]` (peak 1 at pixel `(h/2, w/2)`) for real samples.
pub fn make_depth_target(label: u8, size: [usize; 2]) -> Result<NdArray> {
    let [h, w] = size;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("depth size must be positive, got {size:?}")));
    }
    if label == 0 {
        return Ok(NdArray::zeros(&[h, w]));
    }
    let (ci, cj) = ((h / 2) as f64, (w / 2) as f64);
    let sigma = (h.min(w) as f64 / 4.0).max(0.5);
    let raw: Vec<f64> = (0..h * w)
        .map(|k| {
            let (i, j) = ((k / w) as f64, (k % w) as f64);
            (-((i - ci).powi(2) + (j - cj).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let data = raw.into_iter().map(|v| if span > 0.0 { to_f32_grid((v - lo) / span) } else { 1.0 }).collect();
    NdArray::new(vec![h, w], data)
}

/// Generates every domain of `spec`.
pub fn synth_domains(spec: &SynthSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    spec.domains.iter().map(|d| synth_domain(d, spec.image_shape, spec.depth_shape)).collect()
}

fn synth_domain(spec: &DomainSpec, image_shape: [usize; 3], depth_shape: [usize; 2]) -> Result<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<u8> = std::iter::repeat_n(1, spec.n_real).chain(std::iter::repeat_n(0, spec.n_fake)).collect();
    // Fisher-Yates via rand keeps the order a pure function of the seed.
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let real_depth = make_depth_target(1, depth_shape)?;
    let fake_depth = make_depth_target(0, depth_shape)?;
    let samples = labels
        .into_iter()
        .map(|y| {
            let x = render(&spec.shift, y, image_shape, &mut rng)?;
            let depth = if y == 1 { real_depth.clone() } else { fake_depth.clone() };
            Ok(Sample { x, y, depth })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainDataset { spec: spec.clone(), image_shape, depth_shape, samples })
}

/// Background intensity pattern in `[0, 1]` for texture `id` at `(u, v)`.
fn background(id: u32, u: f64, v: f64, phase: f64) -> f64 {
    let t = match id % 4 {
        0 => (6.0 * PI * v + phase).sin(),
        1 => (5.0 * PI * u + phase).sin(),
        2 => (3.0 * PI * u + phase).sin() * (3.0 * PI * v).sin(),
        _ => (7.0 * PI * (u * u + v * v).sqrt() + phase).sin(),
    };
    0.5 + 0.5 * t
}

fn palette(id: u32) -> ([f64; 3], [f64; 3]) {
    match id % 4 {
        0 => ([0.25, 0.3, 0.45], [0.55, 0.6, 0.7]),
        1 => ([0.4, 0.35, 0.25], [0.7, 0.65, 0.5]),
        2 => ([0.2, 0.4, 0.25], [0.5, 0.7, 0.45]),
        _ => ([0.35, 0.25, 0.4], [0.65, 0.5, 0.7]),
    }
}

/// Additive attack artifact for texture `id` at pixel `(i, j)` of an `h x w`
/// image. Each texture has its own attack type; border luminance moves in
/// opposite directions for the print and screen types.
fn attack_artifact(id: u32, i: usize, j: usize, h: usize, w: usize) -> [f64; 3] {
    let edge = (h.min(w) / 8).max(1);
    let rows = i < edge || i >= h - edge;
    let cols = j < edge || j >= w - edge;
    match id % 4 {
        // dark print frame
        0 if rows || cols => [-0.06, -0.06, -0.06],
        // bright screen bezel, top and bottom
        1 if rows => [0.06, 0.06, 0.06],
        // moire from a screen grid
        2 => {
            let m = 0.018 * (PI * (i + j) as f64 / 1.5).sin();
            [m, m, m]
        }
        // bluish tablet cast
        3 => [-0.01, 0.0, 0.024],
        _ => [0.0; 3],
    }
}

fn render(shift: &DomainShift, label: u8, image_shape: [usize; 3], rng: &mut ChaCha8Rng) -> Result<NdArray> {
    let [c, h, w] = image_shape;
    let tex = shift.background_texture_id;
    let (bg_a, bg_b) = palette(tex);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let cx = rng.gen_range(-0.15..0.15);
    let cy = rng.gen_range(-0.15..0.15);
    let radius = rng.gen_range(0.5..0.7);
    let tone = rng.gen_range(0.8..1.1);
    let skin = [0.85 * tone, 0.65 * tone, 0.55 * tone];
    let light_angle = rng.gen_range(0.0..2.0 * PI);
    let light = {
        let (s, co) = light_angle.sin_cos();
        let l = [0.6 * co, 0.6 * s, 0.8];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    // Shading strength: attacks are flattened re-captures, so their shading
    // contrast is compressed. The ranges overlap slightly.
    let contrast = if label == 1 { rng.gen_range(0.45..1.0) } else { rng.gen_range(0.12..0.55) };
    let hue = color::hue_rotation_matrix(shift.hue_rotation);

    let mut img = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let u = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
            let v = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
            let t = background(tex, u, v, phase);
            let mut px = [0.0; 3];
            for k in 0..3 {
                px[k] = bg_a[k] + t * (bg_b[k] - bg_a[k]);
            }
            let (du, dv) = ((u - cx) / radius, (v - cy) / radius);
            let d2 = du * du + dv * dv;
            if d2 < 1.0 {
                let nz = (1.0 - d2).sqrt();
                let lambert = (du * light[0] + dv * light[1] + nz * light[2]).max(0.0);
                // mean shade of a lit hemisphere is about 0.6
                let shade = 0.6 + contrast * (lambert - 0.6);
                for k in 0..3 {
                    px[k] = skin[k] * shade;
                }
            }
            if label == 0 {
                let a = attack_artifact(tex, i, j, h, w);
                for k in 0..3 {
                    px[k] += a[k];
                }
            }
            let mut rotated = [0.0; 3];
            for (r, row) in hue.iter().enumerate() {
                rotated[r] = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
            }
            for (k, val) in rotated.iter().enumerate() {
                let noise: f64 = if shift.noise_sigma > 0.0 {
                    shift.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let value = (val * shift.brightness_scale + noise).clamp(0.0, 1.0);
                img[(k * h + i) * w + j] = to_f32_grid(value);
            }
        }
    }
    NdArray::new(vec![c, h, w], img)
}

/// Draws a class-balanced batch of `b` samples (`b/2` per class), without
/// replacement within the call.
pub fn sample_batch(d: &DomainDataset, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if b == 0 || !b.is_multiple_of(2) {
        return Err(Error::Config(format!("batch size must be positive and even, got {b}")));
    }
    let half = b / 2;
    let mut picked: Vec<&Sample> = Vec::with_capacity(b);
    for label in [1u8, 0u8] {
        let class: Vec<&Sample> = d.samples.iter().filter(|s| s.y == label).collect();
        if class.len() < half {
            return Err(Error::InsufficientSamples {
                domain: d.spec.name.clone(),
                class: label,
                needed: half,
                have: class.len(),
            });
        }
        for i in index::sample(rng, class.len(), half) {
            picked.push(class[i]);
        }
    }
    Batch::from_samples(picked, d.image_shape, d.depth_shape)
}

#[cfg(test)]
mod tests;
