//! Procedural camouflage scenes: a value-noise background with one or two
//! shapes drawn in a shifted copy of the same texture.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::imageio;
use super::manifest::{write_manifest, ManifestLine, Split};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
/// Written next to the manifest; its presence marks a synthetic dataset.
pub const SIDECAR_NAME: &str = "synth_config.json";

const NOISE_CELLS: usize = 6;
const BG_LO: f64 = 0.3;
const BG_HI: f64 = 0.7;
/// Foreground intensity offset at zero camouflage.
const MAX_OFFSET: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Blob,
    Star,
    Worm,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Blob, Self::Star, Self::Worm, Self::Ring];

    pub fn label(self) -> &'static str {
        match self {
            Self::Blob => "blob",
            Self::Star => "star",
            Self::Worm => "worm",
            Self::Ring => "ring",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub image_side: usize,
    pub classes: Vec<ShapeClass>,
    /// 1 draws the shape in the background texture itself; 0 adds the
    /// full intensity offset.
    pub camouflage_strength: f64,
    pub second_shape_prob: f64,
    /// Every k-th sample goes to the test split; 0 keeps all in train.
    pub test_every: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_samples: 8,
            image_side: 64,
            classes: ShapeClass::ALL.to_vec(),
            camouflage_strength: 0.5,
            second_shape_prob: 0.0,
            test_every: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if self.image_side < 16 {
            return bad("image_side must be at least 16");
        }
        if self.classes.is_empty() {
            return bad("classes must not be empty");
        }
        if !(0.0..=1.0).contains(&self.camouflage_strength) {
            return bad("camouflage_strength must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.second_shape_prob) {
            return bad("second_shape_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Smooth value noise in `[0, 1]` on a periodic grid of random values.
struct ValueNoise {
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        ValueNoise {
            grid: (0..NOISE_CELLS * NOISE_CELLS).map(|_| rng.random()).collect(),
        }
    }

    /// `u, v` in cell units; wraps around.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = NOISE_CELLS as f64;
        let (u, v) = (u.rem_euclid(n), v.rem_euclid(n));
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let fade = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (fade(u - x0 as f64), fade(v - y0 as f64));
        let g = |x: usize, y: usize| self.grid[(y % NOISE_CELLS) * NOISE_CELLS + x % NOISE_CELLS];
        let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
        let bot = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Two octaves of value noise, mapped into `[BG_LO, BG_HI]`.
struct Texture {
    coarse: ValueNoise,
    fine: ValueNoise,
    tint: [f64; 3],
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let coarse = ValueNoise::new(rng);
        let fine = ValueNoise::new(rng);
        let tint = [0; 3].map(|_| rng.random_range(-0.05..0.05));
        Texture { coarse, fine, tint }
    }

    fn sample(&self, x: f64, y: f64, side: f64) -> [f64; 3] {
        let (u, v) = (x / side * NOISE_CELLS as f64, y / side * NOISE_CELLS as f64);
        let n = 0.7 * self.coarse.at(u, v) + 0.3 * self.fine.at(2.0 * u + 0.5, 2.0 * v + 0.5);
        let base = BG_LO + (BG_HI - BG_LO) * n;
        self.tint.map(|t| base + t)
    }
}

/// A shape placed in the image, tested in pixel-centre coordinates.
struct Shape {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    r: f64,
    phase: f64,
    angle: f64,
}

impl Shape {
    fn random(class: ShapeClass, side: f64, rng: &mut ChaCha8Rng) -> Self {
        let r = side * rng.random_range(0.16..0.24);
        let margin = r * 1.3;
        Shape {
            class,
            cx: rng.random_range(margin..side - margin),
            cy: rng.random_range(margin..side - margin),
            r,
            phase: rng.random_range(0.0..2.0 * PI),
            angle: rng.random_range(0.0..PI),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let d = dx.hypot(dy);
        let theta = dy.atan2(dx);
        match self.class {
            ShapeClass::Blob => {
                let edge = self.r * (1.0 + 0.2 * (3.0 * theta + self.phase).sin() + 0.08 * (5.0 * theta).cos());
                d <= edge
            }
            ShapeClass::Star => d <= self.r * (0.6 + 0.4 * (5.0 * (theta - self.phase)).cos()),
            ShapeClass::Ring => d <= self.r && d >= 0.55 * self.r,
            ShapeClass::Worm => {
                let (s, c) = self.angle.sin_cos();
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                let wave = 0.35 * self.r * (2.0 * PI * along / self.r + self.phase).sin();
                along.abs() <= self.r * 1.05 && (across - wave).abs() <= 0.22 * self.r
            }
        }
    }
}

fn render_mask(shape: &Shape, side: usize) -> Vec<bool> {
    (0..side * side)
        .map(|i| shape.contains((i % side) as f64 + 0.5, (i / side) as f64 + 0.5))
        .collect()
}

/// Dilation minus erosion of `mask` with a 3x3 square.
pub fn morphological_gradient(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let window = |i: usize| {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        (-1..=1).flat_map(move |dr| (-1..=1).map(move |dc| (r + dr, c + dc)))
    };
    (0..h * w)
        .map(|i| {
            let mut any = false;
            let mut all = true;
            for (r, c) in window(i) {
                let v = r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize];
                any |= v;
                all &= v;
            }
            any && !all
        })
        .collect()
}

struct Scene {
    rgb: Vec<f64>,
    masks: Vec<(ShapeClass, Vec<bool>)>,
    edge: Vec<bool>,
}

fn render_scene(cfg: &SynthConfig, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let side = cfg.image_side;
    let sf = side as f64;
    let texture = Texture::new(&mut rng);

    let first = cfg.classes[rng.random_range(0..cfg.classes.len())];
    let mut shapes = vec![Shape::random(first, sf, &mut rng)];
    let mut masks = vec![(first, render_mask(&shapes[0], side))];
    if cfg.classes.len() > 1 && rng.random_bool(cfg.second_shape_prob) {
        let others: Vec<ShapeClass> = cfg.classes.iter().copied().filter(|&c| c != first).collect();
        let class = others[rng.random_range(0..others.len())];
        // a few placement attempts; skip the second shape if all overlap
        for _ in 0..8 {
            let shape = Shape::random(class, sf, &mut rng);
            let mask = render_mask(&shape, side);
            let grown = morphological_gradient(&masks[0].1, side, side);
            let clash = mask.iter().zip(&masks[0].1).zip(&grown).any(|((&a, &b), &g)| a && (b || g));
            if !clash && mask.iter().any(|&m| m) {
                shapes.push(shape);
                masks.push((class, mask));
                break;
            }
        }
    }

    let offset_mag = MAX_OFFSET * (1.0 - cfg.camouflage_strength);
    let offsets: Vec<(f64, f64, f64)> = shapes
        .iter()
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (rng.random_range(0.0..sf), rng.random_range(0.0..sf), sign * offset_mag)
        })
        .collect();

    let plane = side * side;
    let mut rgb = vec![0.0; 3 * plane];
    for i in 0..plane {
        let (x, y) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
        let owner = masks.iter().position(|(_, m)| m[i]);
        let px = match owner {
            Some(k) => {
                let (sx, sy, off) = offsets[k];
                texture.sample(x + sx, y + sy, sf).map(|v| v + off)
            }
            None => texture.sample(x, y, sf),
        };
        for c in 0..3 {
            rgb[c * plane + i] = px[c].clamp(0.0, 1.0);
        }
    }
    let union: Vec<bool> = (0..plane).map(|i| masks.iter().any(|(_, m)| m[i])).collect();
    let edge = morphological_gradient(&union, side, side);
    Scene { rgb, masks, edge }
}

fn mask_pixels(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| if m { 255 } else { 0 }).collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders the dataset into `out_dir` and returns the manifest path.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    for sub in ["images", "masks", "edges"] {
        create_dir(&out_dir.join(sub))?;
    }
    let side = cfg.image_side;
    let mut lines = Vec::with_capacity(cfg.n_samples);
    for index in 0..cfg.n_samples {
        let scene = render_scene(cfg, index);
        let id = format!("synth_{index:04}");
        let image = format!("images/{id}.png");
        imageio::save_rgb(&out_dir.join(&image), &scene.rgb, side, side)?;
        let mut masks = std::collections::BTreeMap::new();
        for (class, mask) in &scene.masks {
            let rel = format!("masks/{id}_{}.png", class.label());
            imageio::save_gray(&out_dir.join(&rel), mask_pixels(mask), side, side)?;
            masks.insert(class.label().to_string(), rel);
        }
        let edge = format!("edges/{id}.png");
        imageio::save_gray(&out_dir.join(&edge), mask_pixels(&scene.edge), side, side)?;
        let split = if cfg.test_every > 0 && index % cfg.test_every == cfg.test_every - 1 {
            Split::Test
        } else {
            Split::Train
        };
        lines.push(ManifestLine {
            id,
            image,
            masks,
            edge: Some(edge),
            split,
        });
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &lines)?;
    let sidecar = out_dir.join(SIDECAR_NAME);
    std::fs::write(&sidecar, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(manifest)
}

/// Printed with evaluation results on generated data.
pub const SYNTHETIC_CAVEAT: &str = "NOT REPRODUCIBLE at desk scale: published benchmark scores need pretrained \
text/visual encoders and real camouflage imagery; these numbers come from mock encoders on synthetic data.";

/// The caveat to print with metrics computed on `manifest`, if any.
pub fn eval_caveat(manifest: &Path) -> Option<&'static str> {
    is_synthetic(manifest).then_some(SYNTHETIC_CAVEAT)
}

/// True when the manifest sits next to a generator sidecar.
pub fn is_synthetic(manifest: &Path) -> bool {
    manifest
        .parent()
        .unwrap_or(Path::new("."))
        .join(SIDECAR_NAME)
        .is_file()
}
