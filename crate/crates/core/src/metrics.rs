//! Segmentation quality measures: overlap statistics (Dice, sensitivity,
//! specificity, precision, recall) and boundary distances (95th-percentile
//! Hausdorff, average symmetric surface distance), evaluated per region where
//! a region is a union of labels.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boolean grid of rank 2 (`[H, W]`) or 3 (`[D, H, W]`) with per-axis spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: Vec<usize>,
    grid: Vec<bool>,
    spacing: Vec<f64>,
}

impl BinaryMask {
    pub fn new(dims: &[usize], grid: Vec<bool>) -> Result<Self> {
        check_dims("binary_mask", dims)?;
        let n: usize = dims.iter().product();
        if grid.len() != n {
            return Err(Error::shape("binary_mask", "grid", n, grid.len()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            grid,
            spacing: vec![1.0; dims.len()],
        })
    }

    /// Mask with the given foreground coordinates set.
    pub fn from_coords(dims: &[usize], coords: &[&[usize]]) -> Result<Self> {
        let n: usize = dims.iter().product();
        let mut grid = vec![false; n];
        for c in coords {
            if c.len() != dims.len() || c.iter().zip(dims).any(|(&i, &d)| i >= d) {
                return Err(Error::invalid(
                    "binary_mask",
                    format!("coordinate {c:?} outside {dims:?}"),
                ));
            }
            grid[c.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)] = true;
        }
        Self::new(dims, grid)
    }

    pub fn with_spacing(mut self, spacing: &[f64]) -> Result<Self> {
        if spacing.len() != self.dims.len() {
            return Err(Error::shape(
                "binary_mask",
                "spacing",
                self.dims.len(),
                spacing.len(),
            ));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(
                "binary_mask",
                format!("spacing {spacing:?} must be positive"),
            ));
        }
        self.spacing = spacing.to_vec();
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.grid.iter().any(|&v| v)
    }

    /// Dims and spacing padded to three axes (a 2-D mask is one slice deep).
    fn dims3(&self) -> ([usize; 3], [f64; 3]) {
        match self.dims.len() {
            2 => (
                [1, self.dims[0], self.dims[1]],
                [1.0, self.spacing[0], self.spacing[1]],
            ),
            _ => (
                [self.dims[0], self.dims[1], self.dims[2]],
                [self.spacing[0], self.spacing[1], self.spacing[2]],
            ),
        }
    }

    fn unravel(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        let mut rest = idx;
        for (o, &d) in out.iter_mut().zip(&self.dims).rev() {
            *o = rest % d;
            rest /= d;
        }
        out
    }
}

fn check_dims(op: &'static str, dims: &[usize]) -> Result<()> {
    if !(dims.len() == 2 || dims.len() == 3) {
        return Err(Error::invalid(
            op,
            format!("rank must be 2 or 3, got {}", dims.len()),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(op, format!("empty grid {dims:?}")));
    }
    Ok(())
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::invalid(
            "metrics",
            format!("shape mismatch: {:?} vs {:?}", a.dims, b.dims),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`; `None` when both masks are empty.
    pub fn dice(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        self.sensitivity()
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    same_shape(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.grid.iter().zip(&gt.grid) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice overlap; two empty masks count as perfect agreement (1.0). The
/// report flags that case as [`Flag::DiceBothEmpty`].
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.dice().unwrap_or(1.0))
}

/// Which voxels take part in distance computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Boundary voxels only (face connectivity).
    #[default]
    Surface,
    /// Every foreground voxel.
    AllVoxels,
}

/// Foreground voxels with at least one face neighbour that is background or
/// lies outside the grid (4-connectivity in 2-D, 6 in 3-D). Coordinates
/// follow the mask's own rank.
pub fn surface_voxels(mask: &BinaryMask) -> Vec<Vec<usize>> {
    surface_indices(mask)
        .into_iter()
        .map(|i| mask.unravel(i))
        .collect()
}

fn surface_indices(mask: &BinaryMask) -> Vec<usize> {
    let ([d, h, w], _) = mask.dims3();
    let volumetric = mask.dims.len() == 3;
    let g = &mask.grid;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                if !g[idx] {
                    continue;
                }
                let exposed = y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !g[idx - w]
                    || !g[idx + w]
                    || !g[idx - 1]
                    || !g[idx + 1]
                    || (volumetric && (z == 0 || z + 1 == d || !g[idx - h * w] || !g[idx + h * w]));
                if exposed {
                    out.push(idx);
                }
            }
        }
    }
    out
}

fn point_set(mask: &BinaryMask, mode: DistanceMode) -> Vec<usize> {
    match mode {
        DistanceMode::Surface => surface_indices(mask),
        DistanceMode::AllVoxels => (0..mask.grid.len()).filter(|&i| mask.grid[i]).collect(),
    }
}

/// Squared Euclidean distance (spacing-scaled) from every voxel to the nearest
/// of `sites`, by separable lower-envelope transforms along each axis.
fn squared_distance_field(mask: &BinaryMask, sites: &[usize]) -> Vec<f64> {
    let ([d, h, w], [sd, sh, sw]) = mask.dims3();
    let mut field = vec![f64::INFINITY; d * h * w];
    for &s in sites {
        field[s] = 0.0;
    }
    let longest = d.max(h).max(w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::with_capacity(longest);

    // along W
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            env.transform(&field[base..base + w], sw, &mut out[..w]);
            field[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // along H
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = field[(z * h + y) * w + x];
            }
            env.transform(&line[..h], sh, &mut out[..h]);
            for y in 0..h {
                field[(z * h + y) * w + x] = out[y];
            }
        }
    }
    // along D
    if d > 1 {
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    line[z] = field[(z * h + y) * w + x];
                }
                env.transform(&line[..d], sd, &mut out[..d]);
                for z in 0..d {
                    field[(z * h + y) * w + x] = out[z];
                }
            }
        }
    }
    field
}

/// Scratch space for the 1-D lower envelope of parabolas
/// `q -> (spacing * (q - p))^2 + f(p)`.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[f64], spacing: f64, out: &mut [f64]) {
        let s2 = spacing * spacing;
        self.sites.clear();
        self.bounds.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            let qf = q as f64;
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let pf = p as f64;
                let cross = ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                if cross <= *self.bounds.last().expect("bound per site") {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(cross);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < qf {
                k += 1;
            }
            let p = self.sites[k];
            let dq = spacing * (qf - p as f64);
            *o = dq * dq + f[p];
        }
    }
}

/// Distances from every point of `from` to the nearest point of `to`, or
/// `None` when either set is empty.
fn directed_distances(from: &BinaryMask, to: &BinaryMask, mode: DistanceMode) -> Option<Vec<f64>> {
    let sources = point_set(from, mode);
    let targets = point_set(to, mode);
    if sources.is_empty() || targets.is_empty() {
        return None;
    }
    let field = squared_distance_field(to, &targets);
    Some(sources.iter().map(|&i| field[i].sqrt()).collect())
}

/// Nearest-rank percentile: the `ceil(q * n)`-th smallest value.
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty list");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Symmetric distance summary between two masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub hausdorff: f64,
    pub average: f64,
}

pub fn surface_distances(
    pred: &BinaryMask,
    gt: &BinaryMask,
    mode: DistanceMode,
) -> Result<Option<SurfaceDistances>> {
    same_shape(pred, gt)?;
    if pred.spacing != gt.spacing {
        return Err(Error::invalid("metrics", "masks have different spacing"));
    }
    let (Some(ab), Some(ba)) = (
        directed_distances(pred, gt, mode),
        directed_distances(gt, pred, mode),
    ) else {
        return Ok(None);
    };
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let pooled: f64 = ab.iter().sum::<f64>() + ba.iter().sum::<f64>();
    Ok(Some(SurfaceDistances {
        hd95: nearest_rank_percentile(&ab, 0.95).max(nearest_rank_percentile(&ba, 0.95)),
        hausdorff: max(&ab).max(max(&ba)),
        average: pooled / (ab.len() + ba.len()) as f64,
    }))
}

/// 95th-percentile symmetric Hausdorff distance on surfaces; `None` when
/// either mask is empty.
pub fn hausdorff95(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt, DistanceMode::Surface)?.map(|d| d.hd95))
}

/// Mean of all directed surface distances pooled over both directions.
pub fn average_surface_distance(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt, DistanceMode::Surface)?.map(|d| d.average))
}

/// Integer label volume of rank 2 or 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Vec<usize>,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: &[usize], labels: Vec<u8>) -> Result<Self> {
        check_dims("label_map", dims)?;
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::shape("label_map", "labels", n, labels.len()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            labels,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Named union of labels evaluated as one binary region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub labels: BTreeSet<u8>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, labels: impl IntoIterator<Item = u8>) -> Self {
        Self {
            name: name.into(),
            labels: labels.into_iter().collect(),
        }
    }

    /// Enhancing tumour, whole tumour and tumour core over the labels
    /// 1 (necrosis), 2 (edema) and 4 (enhancing).
    pub fn brain_tumor() -> Vec<Self> {
        vec![
            Self::new("ET", [4]),
            Self::new("WT", [1, 2, 4]),
            Self::new("TC", [1, 4]),
        ]
    }

    /// One region per foreground label `1..n_classes`, named `class<k>`.
    pub fn per_class(n_classes: u8) -> Vec<Self> {
        (1..n_classes)
            .map(|k| Self::new(format!("class{k}"), [k]))
            .collect()
    }
}

pub fn compose_region(label_map: &LabelMap, spec: &RegionSpec) -> BinaryMask {
    let grid = label_map
        .labels
        .iter()
        .map(|l| spec.labels.contains(l))
        .collect();
    BinaryMask {
        dims: label_map.dims.clone(),
        grid,
        spacing: vec![1.0; label_map.dims.len()],
    }
}

/// Marks a metric whose value is a convention or is missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flag {
    DiceBothEmpty,
    SensitivityUndefined,
    SpecificityUndefined,
    PrecisionUndefined,
    DistanceUndefined,
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flag::DiceBothEmpty => "dice_both_empty",
            Flag::SensitivityUndefined => "sensitivity_undefined",
            Flag::SpecificityUndefined => "specificity_undefined",
            Flag::PrecisionUndefined => "precision_undefined",
            Flag::DistanceUndefined => "distance_undefined",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMetrics {
    pub region: String,
    pub dice: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub regions: Vec<RegionMetrics>,
}

impl MetricsReport {
    pub fn region(&self, name: &str) -> Option<&RegionMetrics> {
        self.regions.iter().find(|r| r.region == name)
    }

    /// Text table with one row per region and the given metric columns.
    pub fn render_table(&self, columns: &[Column]) -> String {
        let mut out = String::from("Region");
        for c in columns {
            let _ = write!(out, "\t{}", c.header());
        }
        out.push('\n');
        for r in &self.regions {
            out.push_str(&r.region);
            for c in columns {
                match c.value(r) {
                    Some(v) => {
                        let _ = write!(out, "\t{v:.3}");
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Report columns under their customary display names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Dice,
    Sensitivity,
    Specificity,
    Hausdorff95,
    /// Same value as [`Column::Hausdorff95`] under the shorter heading.
    Hausdorff,
    AvgDist,
    Precision,
    Recall,
}

/// Tumour-style summary: overlap plus HD95.
pub const TUMOR_COLUMNS: [Column; 4] = [
    Column::Dice,
    Column::Sensitivity,
    Column::Specificity,
    Column::Hausdorff95,
];
/// Lesion-style summary.
pub const LESION_COLUMNS: [Column; 5] = [
    Column::Dice,
    Column::Hausdorff,
    Column::AvgDist,
    Column::Precision,
    Column::Recall,
];

impl Column {
    pub fn header(self) -> &'static str {
        match self {
            Column::Dice => "Dice",
            Column::Sensitivity => "Sensitivity",
            Column::Specificity => "Specificity",
            Column::Hausdorff95 => "Hausdorff95",
            Column::Hausdorff => "Hausdorff",
            Column::AvgDist => "Avg. Dist.",
            Column::Precision => "Precision",
            Column::Recall => "Recall",
        }
    }

    fn value(self, r: &RegionMetrics) -> Option<f64> {
        match self {
            Column::Dice => Some(r.dice),
            Column::Sensitivity => r.sensitivity,
            Column::Specificity => r.specificity,
            Column::Hausdorff95 | Column::Hausdorff => r.hd95,
            Column::AvgDist => r.asd,
            Column::Precision => r.precision,
            Column::Recall => r.recall,
        }
    }
}

/// Every metric for every region. `spacing` has one entry per axis.
pub fn evaluate(
    pred: &LabelMap,
    gt: &LabelMap,
    specs: &[RegionSpec],
    spacing: &[f64],
    mode: DistanceMode,
) -> Result<MetricsReport> {
    if pred.dims != gt.dims {
        return Err(Error::invalid(
            "evaluate",
            format!("shape mismatch: {:?} vs {:?}", pred.dims, gt.dims),
        ));
    }
    let mut regions = Vec::with_capacity(specs.len());
    for spec in specs {
        let p = compose_region(pred, spec).with_spacing(spacing)?;
        let g = compose_region(gt, spec).with_spacing(spacing)?;
        let c = confusion_counts(&p, &g)?;
        let dist = surface_distances(&p, &g, mode)?;
        let mut flags = Vec::new();
        let dice = c.dice().unwrap_or_else(|| {
            flags.push(Flag::DiceBothEmpty);
            1.0
        });
        let sensitivity = c.sensitivity();
        if sensitivity.is_none() {
            flags.push(Flag::SensitivityUndefined);
        }
        let specificity = c.specificity();
        if specificity.is_none() {
            flags.push(Flag::SpecificityUndefined);
        }
        let precision = c.precision();
        if precision.is_none() {
            flags.push(Flag::PrecisionUndefined);
        }
        if dist.is_none() {
            flags.push(Flag::DistanceUndefined);
        }
        regions.push(RegionMetrics {
            region: spec.name.clone(),
            dice,
            sensitivity,
            specificity,
            precision,
            recall: c.recall(),
            hd95: dist.map(|d| d.hd95),
            asd: dist.map(|d| d.average),
            flags,
        });
    }
    Ok(MetricsReport { regions })
}

pub const CSV_HEADER: &str =
    "case,region,dice,sensitivity,specificity,precision,recall,hd95,asd,flags";

fn csv_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One CSV row per (case, region); undefined values are left empty and the
/// `flags` column lists the reasons separated by `;`.
pub fn write_csv<'a>(
    out: &mut impl Write,
    cases: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>,
) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (case, report) in cases {
        for r in &report.regions {
            let flags: Vec<String> = r.flags.iter().map(Flag::to_string).collect();
            writeln!(
                out,
                "{case},{},{},{},{},{},{},{},{},{}",
                r.region,
                csv_num(Some(r.dice)),
                csv_num(r.sensitivity),
                csv_num(r.specificity),
                csv_num(r.precision),
                csv_num(r.recall),
                csv_num(r.hd95),
                csv_num(r.asd),
                flags.join(";"),
            )?;
        }
    }
    Ok(())
}
