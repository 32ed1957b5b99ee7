//! Seeded multi-modal synthetic volumes with controllable class skew.
//!
//! Each foreground class is the top-`n` voxels of a smooth field built from
//! Gaussian bumps, so a volume hits its target class counts exactly. Class
//! contrast is a fixed per-modality permutation of intensity levels, which
//! makes datasets generated with different seeds share one appearance model.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::volume::{Volume, EXTENSION};

const CONTRAST_STREAM: u64 = 0xC0A7_7A57_0000_0000;
const VOLUME_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const BIAS_AMPLITUDE: f64 = 0.1;

pub const CONFIG_FILE: &str = "synth_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_volumes: usize,
    pub slices_per_volume: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Fraction of all voxels per foreground class `1..n_classes`.
    pub class_fractions: Vec<f64>,
    pub modality_count: usize,
    pub noise_sigma: f64,
    pub bias_field: bool,
    /// Concentric class regions, class `n_classes - 1` innermost.
    pub nested: bool,
    /// Restrict anatomy to an elliptical valid region; the rest is padding.
    pub padding: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_volumes: 4,
            slices_per_volume: 16,
            height: 64,
            width: 64,
            n_classes: 4,
            class_fractions: vec![0.05, 0.03, 0.02],
            modality_count: 3,
            noise_sigma: 0.3,
            bias_field: false,
            nested: false,
            padding: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_volumes == 0 || self.slices_per_volume == 0 || self.height == 0 || self.width == 0
        {
            return fail("n_volumes, slices_per_volume, height and width must be positive".into());
        }
        if !(1..=256).contains(&self.n_classes) {
            return fail(format!(
                "n_classes must lie in 1..=256, got {}",
                self.n_classes
            ));
        }
        if self.class_fractions.len() != self.n_classes - 1 {
            return fail(format!(
                "{} class fractions given for {} foreground classes",
                self.class_fractions.len(),
                self.n_classes - 1
            ));
        }
        if self
            .class_fractions
            .iter()
            .any(|f| !f.is_finite() || *f < 0.0)
        {
            return fail("class fractions must be finite and nonnegative".into());
        }
        let total: f64 = self.class_fractions.iter().sum();
        if total > 1.0 {
            return fail(format!("class fractions sum to {total} > 1"));
        }
        if self.modality_count == 0 {
            return fail("modality_count must be positive".into());
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return fail("noise_sigma must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// Intensity level of each class in `modality`: a permutation of `1..=K`
/// that depends only on the modality index and class count.
pub fn class_levels(modality: usize, n_classes: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(CONTRAST_STREAM ^ modality as u64);
    ranks.shuffle(&mut rng);
    ranks.into_iter().map(|r| 1.0 + r as f64).collect()
}

struct Bump {
    centre: [f64; 3],
    inv_two_var: [f64; 3],
    amplitude: f64,
}

impl Bump {
    fn at(&self, p: [f64; 3]) -> f64 {
        let e: f64 = (0..3)
            .map(|a| (p[a] - self.centre[a]).powi(2) * self.inv_two_var[a])
            .sum();
        self.amplitude * (-e).exp()
    }
}

struct Geometry {
    d: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn point(&self, idx: usize) -> [f64; 3] {
        let plane = self.h * self.w;
        [
            (idx / plane) as f64 + 0.5,
            ((idx % plane) / self.w) as f64 + 0.5,
            (idx % self.w) as f64 + 0.5,
        ]
    }
}

fn blob_field(
    rng: &mut ChaCha8Rng,
    g: &Geometry,
    candidates: &[usize],
    anchors: &[usize],
) -> Vec<f64> {
    let n_bumps = rng.random_range(1..=3);
    let sigma_xy = 0.12 * g.h.min(g.w) as f64;
    let sigma_z = (0.3 * g.d as f64).max(1.0);
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|_| {
            let anchor = g.point(anchors[rng.random_range(0..anchors.len())]);
            let mut centre = [0.0; 3];
            for (c, a) in centre.iter_mut().zip(anchor) {
                *c = a + rng.random_range(-0.5..0.5);
            }
            let scale = [
                sigma_z * rng.random_range(0.6..1.4),
                sigma_xy * rng.random_range(0.6..1.4),
                sigma_xy * rng.random_range(0.6..1.4),
            ];
            Bump {
                centre,
                inv_two_var: scale.map(|s| 1.0 / (2.0 * s * s)),
                amplitude: rng.random_range(0.5..1.0),
            }
        })
        .collect();
    candidates
        .iter()
        .map(|&i| {
            let p = g.point(i);
            bumps.iter().map(|b| b.at(p)).sum()
        })
        .collect()
}

/// Candidates ordered by descending field value, index breaking ties.
fn rank_desc(candidates: &[usize], field: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        field[b]
            .total_cmp(&field[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    order.into_iter().map(|k| candidates[k]).collect()
}

fn validity_mask(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<bool> {
    let (d, h, w) = (config.slices_per_volume, config.height, config.width);
    if !config.padding {
        return vec![true; d * h * w];
    }
    let cy = h as f64 / 2.0 + rng.random_range(-0.03..0.03) * h as f64;
    let cx = w as f64 / 2.0 + rng.random_range(-0.03..0.03) * w as f64;
    let ay = 0.42 * h as f64 * rng.random_range(0.92..1.0);
    let ax = 0.38 * w as f64 * rng.random_range(0.92..1.0);
    let plane: Vec<bool> = (0..h * w)
        .map(|i| {
            let y = (i / w) as f64 + 0.5;
            let x = (i % w) as f64 + 0.5;
            ((y - cy) / ay).powi(2) + ((x - cx) / ax).powi(2) <= 1.0
        })
        .collect();
    plane.iter().copied().cycle().take(d * h * w).collect()
}

fn bias_gain(rng: &mut ChaCha8Rng, g: &Geometry, valid: &[bool]) -> Vec<f64> {
    let n = rng.random_range(2..=4);
    let sigma = 0.5 * g.h.max(g.w) as f64;
    let sigma_z = (0.5 * g.d as f64).max(1.0);
    let bumps: Vec<Bump> = (0..n)
        .map(|_| Bump {
            centre: [
                rng.random_range(0.0..g.d as f64),
                rng.random_range(0.0..g.h as f64),
                rng.random_range(0.0..g.w as f64),
            ],
            inv_two_var: [sigma_z, sigma, sigma].map(|s| 1.0 / (2.0 * s * s)),
            amplitude: rng.random_range(-1.0..1.0),
        })
        .collect();
    let raw: Vec<f64> = (0..valid.len())
        .map(|i| 1.0 + BIAS_AMPLITUDE * bumps.iter().map(|b| b.at(g.point(i))).sum::<f64>())
        .collect();
    let n_valid = valid.iter().filter(|&&v| v).count().max(1);
    let mean = raw
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(r, _)| r)
        .sum::<f64>()
        / n_valid as f64;
    raw.into_iter().map(|r| r / mean).collect()
}

/// Volume `index` of the dataset described by `config`.
pub fn generate_volume(config: &SynthConfig, index: usize) -> Result<Volume> {
    config.validate()?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.seed ^ (index as u64 + 1).wrapping_mul(VOLUME_STREAM));
    let g = Geometry {
        d: config.slices_per_volume,
        h: config.height,
        w: config.width,
    };
    let total = g.d * g.h * g.w;
    let valid = validity_mask(&mut rng, config);
    let valid_idx: Vec<usize> = (0..total).filter(|&i| valid[i]).collect();
    let targets: Vec<usize> = config
        .class_fractions
        .iter()
        .map(|f| (f * total as f64).round() as usize)
        .collect();
    let needed: usize = targets.iter().sum();
    if needed > valid_idx.len() {
        return Err(Error::Config(format!(
            "class fractions need {needed} voxels but only {} of {total} are valid",
            valid_idx.len()
        )));
    }

    let mut labels = vec![0u8; total];
    if needed > 0 {
        if config.nested {
            let field = blob_field(&mut rng, &g, &valid_idx, &valid_idx);
            let ranked = rank_desc(&valid_idx, &field);
            let mut cursor = 0;
            for class in (1..config.n_classes).rev() {
                for &i in &ranked[cursor..cursor + targets[class - 1]] {
                    labels[i] = class as u8;
                }
                cursor += targets[class - 1];
            }
        } else {
            for class in 1..config.n_classes {
                let n = targets[class - 1];
                let free: Vec<usize> = valid_idx
                    .iter()
                    .copied()
                    .filter(|&i| labels[i] == 0)
                    .collect();
                let field = blob_field(&mut rng, &g, &free, &valid_idx);
                if n == 0 {
                    continue;
                }
                for i in rank_desc(&free, &field).into_iter().take(n) {
                    labels[i] = class as u8;
                }
            }
        }
    }

    let gain = config.bias_field.then(|| bias_gain(&mut rng, &g, &valid));
    let mut image = vec![0.0f32; config.modality_count * total];
    for m in 0..config.modality_count {
        let levels = class_levels(m, config.n_classes);
        let channel = &mut image[m * total..(m + 1) * total];
        for &i in &valid_idx {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mut v = levels[labels[i] as usize] + config.noise_sigma * noise;
            if let Some(gain) = &gain {
                v *= gain[i];
            }
            channel[i] = v as f32;
        }
    }
    Volume::new((config.modality_count, g.d, g.h, g.w), image, labels, valid)
}

pub fn generate_volumes(config: &SynthConfig) -> Result<Vec<Volume>> {
    (0..config.n_volumes)
        .map(|i| generate_volume(config, i))
        .collect()
}

pub fn volume_file_name(index: usize) -> String {
    format!("volume_{index:03}.{EXTENSION}")
}

/// Writes every volume plus a copy of the config into `out_dir`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_json())?;
    let mut paths = Vec::with_capacity(config.n_volumes);
    for i in 0..config.n_volumes {
        let path = dir.join(volume_file_name(i));
        generate_volume(config, i)?.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
