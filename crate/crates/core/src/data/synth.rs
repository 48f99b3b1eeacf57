//! Synthetic shape segmentation corpus: rectangles and discs of distinct
//! classes over a textured background, with exact label masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_sample, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::{dropout_key, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    /// Fraction of images containing the rare class (the last class index).
    #[serde(default = "default_rare")]
    pub rare_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rare() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.num_classes < 2 || self.num_classes > 255 {
            bad.push(format!("synth.num_classes: need 2..=255, got {}", self.num_classes));
        }
        if self.size < 8 {
            bad.push(format!("synth.size: need >= 8, got {}", self.size));
        }
        if !(0.0..=1.0).contains(&self.rare_fraction) {
            bad.push(format!("synth.rare_fraction: must lie in [0, 1], got {}", self.rare_fraction));
        }
        bad
    }

    /// The designated rare class, if there is room for one besides a common class.
    pub fn rare_class(&self) -> Option<u8> {
        (self.num_classes >= 3).then(|| (self.num_classes - 1) as u8)
    }
}

/// Shapes in continuous pixel coordinates; pixel `(y, x)` is covered when
/// its centre `(y + 0.5, x + 0.5)` lies inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape2d {
    /// Half-open box `[top, bottom) x [left, right)`.
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Disc { cy: f64, cx: f64, radius: f64 },
}

impl Shape2d {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape2d::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
            Shape2d::Disc { cy, cx, radius } => (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius,
        }
    }
}

/// Label map for shapes painted in order over background class 0.
pub fn rasterize(shapes: &[(Shape2d, u8)], height: usize, width: usize) -> LabelMap {
    let mut labels = LabelMap::filled(height, width, 0);
    for (shape, class) in shapes {
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels.set(y, x, *class);
                }
            }
        }
    }
    labels
}

fn class_color(class: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.45],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.25, 0.35, 0.85],
        [0.85, 0.80, 0.20],
        [0.70, 0.30, 0.75],
        [0.20, 0.75, 0.80],
        [0.95, 0.55, 0.15],
    ];
    match PALETTE.get(class as usize) {
        Some(c) => *c,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
            [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, size: usize, scale: f64) -> Shape2d {
    let s = size as f64;
    let half = rng.gen_range(s / 10.0..s / 5.0) * scale;
    let cy = rng.gen_range(half..s - half);
    let cx = rng.gen_range(half..s - half);
    if rng.gen_bool(0.5) {
        let aspect: f64 = rng.gen_range(0.6..1.6);
        let (hh, hw) = (half * aspect.sqrt(), half / aspect.sqrt());
        Shape2d::Rect {
            top: cy - hh,
            left: cx - hw,
            bottom: cy + hh,
            right: cx + hw,
        }
    } else {
        Shape2d::Disc { cy, cx, radius: half }
    }
}

/// Generates image `index` of the corpus along with the shapes it was drawn from.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> (SampleRecord, Vec<(Shape2d, u8)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_key(cfg.seed, 0x5EED, index as u64));
    let size = cfg.size;
    let rare = cfg.rare_class();
    let commons: Vec<u8> = (1..cfg.num_classes as u8).filter(|&c| Some(c) != rare).collect();

    let wanted = rng.gen_range(1..=4usize);
    let with_rare = rare.is_some() && rng.gen_bool(cfg.rare_fraction);
    let mut classes: Vec<u8> = commons
        .choose_multiple(&mut rng, wanted.min(commons.len()))
        .copied()
        .collect();
    if let (true, Some(r)) = (with_rare, rare) {
        if classes.len() == wanted {
            classes.pop();
        }
        classes.push(r);
    }
    classes.shuffle(&mut rng);
    let shapes: Vec<(Shape2d, u8)> = classes
        .iter()
        .map(|&c| {
            let scale = if Some(c) == rare { 0.7 } else { 1.0 };
            (random_shape(&mut rng, size, scale), c)
        })
        .collect();
    let labels = rasterize(&shapes, size, size);

    let jitter: Vec<[f64; 3]> = (0..cfg.num_classes)
        .map(|_| [0; 3].map(|_| rng.gen_range(-0.06..0.06)))
        .collect();
    let freq = rng.gen_range(0.15..0.45);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut image = Tensor::zeros(Shape::new(1, 3, size, size));
    for y in 0..size {
        for x in 0..size {
            let class = labels.get(y, x);
            let base = class_color(class);
            let texture = if class == 0 {
                0.08 * ((x as f64 + y as f64 * 0.7) * freq + phase).sin()
            } else {
                0.0
            };
            for c in 0..3 {
                let noise = rng.gen_range(-0.07..0.07);
                let v = base[c] + jitter[class as usize][c] + texture + noise;
                image.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    let sample = SampleRecord::new(image, labels).expect("consistent synthetic sample");
    (sample, shapes)
}

/// Writes `count` samples under `out_dir/{images,labels}` plus
/// `out_dir/manifest.txt`, returning the manifest.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let out = out_dir.as_ref();
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let (sample, _) = synth_sample(cfg, i);
        let img = PathBuf::from(format!("images/{i:05}.ppm"));
        let lbl = PathBuf::from(format!("labels/{i:05}.pgm"));
        save_sample(&sample, out.join(&img), out.join(&lbl))?;
        records.push((img, lbl));
    }
    let manifest = DatasetManifest {
        records,
        num_classes: cfg.num_classes,
        ignore_label: IGNORE_LABEL,
    };
    manifest.write(out.join("manifest.txt"))?;
    Ok(manifest)
}
