//! Per-image training pixel selection.
//!
//! Two strategies: plain uniform sampling of `N` pixels, and class-balanced
//! sampling that splits `N` evenly across the `K` classes present in the
//! image so that rare classes are always represented.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercolumn::Pixel;

/// Integer label image with an optional validity mask (padding is invalid).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    valid: Option<Vec<bool>>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("label_mask", "empty grid"));
        }
        if labels.len() != height * width {
            return Err(Error::shape(
                "label_mask",
                "labels",
                height * width,
                labels.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
            valid: None,
        })
    }

    pub fn with_validity(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.labels.len() {
            return Err(Error::shape(
                "label_mask",
                "validity",
                self.labels.len(),
                valid.len(),
            ));
        }
        self.valid = Some(valid);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn validity(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[idx])
    }

    pub fn get(&self, pixel: Pixel) -> u8 {
        self.labels[pixel.0 * self.width + pixel.1]
    }

    fn eligible(&self, idx: usize, ignore: Option<u8>) -> bool {
        self.is_valid(idx) && Some(self.labels[idx]) != ignore
    }

    fn pixel(&self, idx: usize) -> Pixel {
        (idx / self.width, idx % self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStrategy {
    Uniform,
    ClassBalanced,
}

/// What class-balanced sampling does when a class has fewer pixels than its
/// quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewFallback {
    /// Draw the scarce class with replacement up to its quota.
    #[default]
    Replacement,
    /// Take every pixel of the scarce class once and fill the deficit with
    /// random pixels of the other classes.
    Redistribute,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePlan {
    pub n_total: usize,
    pub strategy: SampleStrategy,
    pub seed: u64,
    pub ignore_label: Option<u8>,
    pub skew_fallback: SkewFallback,
}

impl SamplePlan {
    pub fn new(n_total: usize, strategy: SampleStrategy, seed: u64) -> Self {
        Self {
            n_total,
            strategy,
            seed,
            ignore_label: None,
            skew_fallback: SkewFallback::Replacement,
        }
    }

    /// Same plan with the seed decorrelated for image `index`.
    pub fn for_image(&self, index: u64) -> Self {
        Self {
            seed: self.seed ^ index,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBatch {
    pub coords: Vec<Pixel>,
    pub labels: Vec<u8>,
    pub per_class_counts: BTreeMap<u8, usize>,
}

impl PixelBatch {
    fn from_indices(mask: &LabelMask, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        let mut per_class_counts = BTreeMap::new();
        for idx in indices {
            let label = mask.labels[idx];
            coords.push(mask.pixel(idx));
            labels.push(label);
            *per_class_counts.entry(label).or_insert(0) += 1;
        }
        Self {
            coords,
            labels,
            per_class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Classes among eligible pixels, ascending, with exact pixel counts.
pub fn class_presence(mask: &LabelMask, ignore_label: Option<u8>) -> Vec<(u8, usize)> {
    let mut hist = [0usize; 256];
    for idx in 0..mask.labels.len() {
        if mask.eligible(idx, ignore_label) {
            hist[mask.labels[idx] as usize] += 1;
        }
    }
    hist.iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(l, &n)| (l as u8, n))
        .collect()
}

pub fn sample(mask: &LabelMask, plan: &SamplePlan) -> Result<PixelBatch> {
    match plan.strategy {
        SampleStrategy::Uniform => sample_uniform(mask, plan),
        SampleStrategy::ClassBalanced => sample_class_balanced(mask, plan),
    }
}

/// `N` eligible pixels uniformly at random: without replacement when there
/// are at least `N`, otherwise with replacement.
pub fn sample_uniform(mask: &LabelMask, plan: &SamplePlan) -> Result<PixelBatch> {
    let eligible: Vec<usize> = (0..mask.labels.len())
        .filter(|&i| mask.eligible(i, plan.ignore_label))
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let picks = draw(&eligible, plan.n_total, &mut rng);
    Ok(PixelBatch::from_indices(mask, picks))
}

/// `floor(N/K)` pixels for each of the `K` present classes, with the `N mod K`
/// leftover pixels going one each to the lowest labels.
pub fn sample_class_balanced(mask: &LabelMask, plan: &SamplePlan) -> Result<PixelBatch> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for idx in 0..mask.labels.len() {
        if mask.eligible(idx, plan.ignore_label) {
            by_class.entry(mask.labels[idx]).or_default().push(idx);
        }
    }
    let k = by_class.len();
    if k == 0 {
        return Err(Error::EmptyMask);
    }
    if plan.n_total < k {
        return Err(Error::Config(format!(
            "class-balanced sampling needs n_total >= {k} present classes, got {}",
            plan.n_total
        )));
    }
    let quota = plan.n_total / k;
    let remainder = plan.n_total % k;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    let mut picks = Vec::with_capacity(plan.n_total);
    let mut deficit = 0;
    for (i, pool) in by_class.values().enumerate() {
        let want = quota + usize::from(i < remainder);
        match plan.skew_fallback {
            SkewFallback::Replacement => picks.extend(draw(pool, want, &mut rng)),
            SkewFallback::Redistribute => {
                let take = want.min(pool.len());
                picks.extend(draw(pool, take, &mut rng));
                deficit += want - take;
            }
        }
    }
    if deficit > 0 {
        let mut chosen = vec![false; mask.labels.len()];
        for &p in &picks {
            chosen[p] = true;
        }
        let leftover: Vec<usize> = by_class
            .values()
            .flatten()
            .copied()
            .filter(|&p| !chosen[p])
            .collect();
        if leftover.is_empty() {
            let all: Vec<usize> = by_class.values().flatten().copied().collect();
            picks.extend(draw(&all, deficit, &mut rng));
        } else {
            picks.extend(draw(&leftover, deficit, &mut rng));
        }
    }
    Ok(PixelBatch::from_indices(mask, picks))
}

fn draw(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() >= n {
        index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..n)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}
