use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::FeatureMap;
use crate::tensor::Tensor;

/// Axis-aligned rectangle of grid cells `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl GridBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x0 && col < self.x0 + self.w && row >= self.y0 && row < self.y0 + self.h
    }
}

/// Regression target: normalised centre, width and height, plus a class label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub boxes: [f64; 4],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub max_boxes: usize,
    /// Allowed range of the fraction of the grid covered by the union of boxes.
    pub area_range: (f64, f64),
    /// Norm of the class signal added inside boxes.
    pub signal: f64,
    pub noise_std: f64,
    /// Seed of the fixed class prototypes, shared by every scene.
    pub prototype_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 32,
            num_classes: 3,
            max_boxes: 3,
            area_range: (0.18, 0.30),
            signal: 3.0,
            noise_std: 1.0,
            prototype_seed: 0x5EED,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::contract(format!(
                "scenes need at least an 8x8 grid, got {}x{}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.area_range;
        if !(0.05..=0.30).contains(&lo) || !(lo..=0.30).contains(&hi) {
            return Err(Error::contract(format!("box area range [{lo}, {hi}] must lie within [0.05, 0.30]")));
        }
        if self.channels < 2 || self.num_classes == 0 || self.max_boxes == 0 {
            return Err(Error::contract("scene needs >= 2 channels, >= 1 class and >= 1 box"));
        }
        Ok(())
    }

    /// Mean feature vector inside a box of each class: a component shared by
    /// all classes plus a class-specific one, scaled to norm `signal`.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..self.channels).map(|_| normal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let shared = unit(&mut rng);
        (0..self.num_classes)
            .map(|_| {
                let own = unit(&mut rng);
                let v: Vec<f64> = shared.iter().zip(&own).map(|(a, b)| a + b).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x * self.signal / n).collect()
            })
            .collect()
    }

    /// Unit direction shared by every class prototype.
    pub fn shared_direction(&self) -> Vec<f64> {
        let protos = self.prototypes();
        let mut d = vec![0.0; self.channels];
        for p in &protos {
            d.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.into_iter().map(|x| x / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub feature_map: FeatureMap,
    pub boxes: Vec<GridBox>,
    pub targets: Vec<Target>,
}

impl SyntheticScene {
    /// `mask[l]` is true when location `l` lies inside any box.
    pub fn box_mask(&self) -> Vec<bool> {
        let (h, w) = (self.feature_map.height(), self.feature_map.width());
        (0..h * w)
            .map(|l| self.boxes.iter().any(|b| b.contains(l / w, l % w)))
            .collect()
    }

    pub fn box_area_fraction(&self) -> f64 {
        let mask = self.box_mask();
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    }
}

/// Fixed 2-D sinusoidal position embeddings: half the channels encode the row,
/// half the column, as `sin`/`cos` pairs at integer frequencies.
pub fn position_embeddings(height: usize, width: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut data = Vec::with_capacity(height * width * channels);
    for i in 0..height {
        for j in 0..width {
            let y = (i as f64 + 0.5) / height as f64 * PI;
            let x = (j as f64 + 0.5) / width as f64 * PI;
            let mut row = vec![0.0; channels];
            for (offset, coord, span) in [(0, y, half), (half, x, channels - half)] {
                for k in 0..span {
                    let freq = (k / 2 + 1) as f64;
                    row[offset + k] = if k % 2 == 0 { (freq * coord).sin() } else { (freq * coord).cos() };
                }
            }
            data.extend(row);
        }
    }
    Tensor::new(&[height * width, channels], data).expect("shape matches")
}

fn random_box<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R, max_area: usize) -> GridBox {
    let (gh, gw) = (cfg.height, cfg.width);
    loop {
        let w = rng.random_range(2..=gw / 2);
        let h = rng.random_range(2..=gh / 2);
        if w * h > max_area {
            continue;
        }
        let x0 = rng.random_range(0..=gw - w);
        let y0 = rng.random_range(0..=gh - h);
        return GridBox { x0, y0, w, h };
    }
}

/// Draws a scene: 1 to `max_boxes` labelled rectangles whose union covers a
/// fraction of the grid inside `area_range`, class signal plus noise inside
/// boxes and pure noise elsewhere.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let len = h * w;
    let (lo, hi) = cfg.area_range;
    let max_area = (hi * len as f64).floor() as usize;
    let (boxes, labels) = loop {
        let count = rng.random_range(1..=cfg.max_boxes);
        let boxes: Vec<GridBox> = (0..count).map(|_| random_box(cfg, rng, max_area)).collect();
        let covered = (0..len)
            .filter(|&l| boxes.iter().any(|b| b.contains(l / w, l % w)))
            .count() as f64
            / len as f64;
        if covered >= lo && covered <= hi {
            let labels: Vec<usize> = (0..count).map(|_| rng.random_range(0..cfg.num_classes)).collect();
            break (boxes, labels);
        }
    };
    let protos = cfg.prototypes();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::contract(e.to_string()))?;
    let mut data = Vec::with_capacity(len * c);
    for l in 0..len {
        let (row, col) = (l / w, l % w);
        // Later boxes paint over earlier ones.
        let owner = boxes.iter().rposition(|b| b.contains(row, col));
        match owner {
            Some(k) => data.extend(protos[labels[k]].iter().map(|m| m + noise.sample(rng))),
            None => data.extend((0..c).map(|_| noise.sample(rng))),
        }
    }
    let features = Tensor::new(&[len, c], data)?;
    let feature_map = FeatureMap::new(h, w, features)?.with_positions(position_embeddings(h, w, c))?;
    let targets = boxes
        .iter()
        .zip(&labels)
        .map(|(b, &label)| Target {
            boxes: [
                (b.x0 as f64 + b.w as f64 / 2.0) / w as f64,
                (b.y0 as f64 + b.h as f64 / 2.0) / h as f64,
                b.w as f64 / w as f64,
                b.h as f64 / h as f64,
            ],
            label,
        })
        .collect();
    Ok(SyntheticScene {
        feature_map,
        boxes,
        targets,
    })
}

/// `count` scenes from a dedicated generator seeded with `seed`.
pub fn scene_set(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_scene(&mut rng, cfg)).collect()
}
