//! Procedural texture corpus used as a stand-in for histology patch datasets.
//!
//! Each class is an oriented sinusoidal grating family with its own spatial
//! frequency, orientation and colour; samples vary in phase, colour jitter,
//! contrast and pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::seeding::{stream, StreamDomain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub name: String,
    /// Cycles per image width.
    pub frequency: f64,
    /// Grating orientation in radians.
    pub orientation: f64,
    pub color: [f64; 3],
    /// Secondary frequency superimposed at the orthogonal orientation.
    pub detail_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub name: String,
    pub seed: u64,
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub classes: Vec<ClassTexture>,
    pub checksum: String,
}

const COLOR_JITTER: f64 = 0.04;
const PIXEL_NOISE: f64 = 0.03;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Class parameters for `seed`. Hues are spread evenly around the colour
/// wheel from a seed-dependent starting angle; frequencies and orientations
/// are spread over distinct bands.
pub fn class_textures(n_classes: usize, seed: u64) -> Vec<ClassTexture> {
    let mut rng = stream(seed, StreamDomain::Synthetic, 0);
    let hue0: f64 = rng.random();
    (0..n_classes)
        .map(|c| {
            let t = c as f64 / n_classes as f64;
            let hue = hue0 + t + rng.random_range(-0.15..0.15) / n_classes as f64;
            let sat = rng.random_range(0.55..0.85);
            let val = rng.random_range(0.65..0.9);
            ClassTexture {
                name: format!("class_{c:02}"),
                frequency: 1.5 + 5.0 * ((c * 3) % n_classes) as f64 / n_classes as f64
                    + rng.random_range(0.0..0.4),
                orientation: PI * t + rng.random_range(-0.1..0.1),
                color: hsv_to_rgb(hue, sat, val),
                detail_frequency: rng.random_range(6.0..10.0),
            }
        })
        .collect()
}

fn render(texture: &ClassTexture, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let phase = rng.random_range(0.0..2.0 * PI);
    let detail_phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.25..0.4);
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-COLOR_JITTER..COLOR_JITTER));
    let (s, c) = texture.orientation.sin_cos();
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let along = u * c + v * s;
            let across = -u * s + v * c;
            let wave = (2.0 * PI * texture.frequency * along + phase).sin();
            let detail = (2.0 * PI * texture.detail_frequency * across + detail_phase).sin();
            let intensity = 0.6 + contrast * wave + 0.08 * detail;
            for ch in 0..3 {
                let value = (texture.color[ch] + jitter[ch]) * intensity + noise.sample(rng);
                out.push(value.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Generate `n_classes × per_class` images of `image_size` pixels.
/// Deterministic in `seed`.
pub fn generate_synthetic_corpus(
    n_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(Dataset, SyntheticManifest)> {
    if n_classes < 2 || per_class < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs n_classes >= 2 and per_class >= 2 (got {n_classes}, {per_class})"
        )));
    }
    if image_size == 0 {
        return Err(Error::InvalidArgument("image_size must be positive".into()));
    }
    let classes = class_textures(n_classes, seed);
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for (c, texture) in classes.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = stream(seed, StreamDomain::Synthetic, (c * per_class + i + 1) as u64);
            samples.push(Sample::new(render(texture, image_size, &mut rng), image_size, c)?);
        }
    }
    let name = format!("synthetic-{seed}");
    let dataset = Dataset::new(
        name.clone(),
        Split::Train,
        classes.iter().map(|c| c.name.clone()).collect(),
        image_size,
        samples,
    )?;
    let manifest = SyntheticManifest {
        name,
        seed,
        n_classes,
        per_class,
        image_size,
        checksum: dataset.content_checksum(),
        classes,
    };
    Ok((dataset, manifest))
}

impl SyntheticManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Nearest-centroid accuracy on raw pixels: centroids from `train`, scored
/// on `test`. Used to check that a corpus is separable before anything is
/// trained on it.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let dim = train.image_size * train.image_size * 3;
    let mut centroids = vec![vec![0.0f64; dim]; train.n_classes()];
    let mut counts = vec![0usize; train.n_classes()];
    for s in train.samples() {
        counts[s.class_id] += 1;
        for (a, &p) in centroids[s.class_id].iter_mut().zip(&s.pixels) {
            *a += p as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = test
        .samples()
        .iter()
        .filter(|s| {
            let best = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| {
                    let d: f64 = cen
                        .iter()
                        .zip(&s.pixels)
                        .map(|(a, &b)| (a - b as f64).powi(2))
                        .sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            best == s.class_id
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
