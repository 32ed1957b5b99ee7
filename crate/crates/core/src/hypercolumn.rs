//! Multi-scale hypercolumn descriptors.
//!
//! A pixel of the input image is mapped into every tapped feature map, the
//! map is bilinearly interpolated at that (fractional) location, and the
//! per-level responses are concatenated in level order.

use crate::error::{Error, Result};
use crate::nn::kernels::{self, Taps};
use crate::nn::{Tape, Tensor, Var};

/// Pixel position in input coordinates, `(row, col)`.
pub type Pixel = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    /// `[C, H, W]` response map.
    pub map: Tensor,
    /// Input pixels per map cell.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
    input_height: usize,
    input_width: usize,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureLevel>, input_height: usize, input_width: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("feature_pyramid", "no levels"));
        }
        for (i, level) in levels.iter().enumerate() {
            check_level(level.map.shape(), level.stride, input_height, input_width)
                .map_err(|e| Error::invalid("feature_pyramid", format!("level {i}: {e}")))?;
        }
        Ok(Self {
            levels,
            input_height,
            input_width,
        })
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }

    /// Descriptor width: the sum of channel counts over all levels.
    pub fn width(&self) -> usize {
        self.levels.iter().map(|l| l.map.shape()[0]).sum()
    }

    pub fn hypercolumn(&self, pixel: Pixel) -> Result<Hypercolumn> {
        let vector = extract_hypercolumns(self, &[pixel])?;
        let width = vector.numel();
        Ok(Hypercolumn {
            vector: vector.reshape(&[width])?,
            pixel,
        })
    }
}

fn check_level(
    shape: &[usize],
    stride: usize,
    input_height: usize,
    input_width: usize,
) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::shape("feature_level", "rank", 3, shape.len()));
    }
    if stride == 0 {
        return Err(Error::invalid("feature_level", "stride must be positive"));
    }
    if shape[1] != input_height / stride {
        return Err(Error::shape(
            "feature_level",
            "height",
            input_height / stride,
            shape[1],
        ));
    }
    if shape[2] != input_width / stride {
        return Err(Error::shape(
            "feature_level",
            "width",
            input_width / stride,
            shape[2],
        ));
    }
    Ok(())
}

/// Descriptor of a single pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercolumn {
    pub vector: Tensor,
    pub pixel: Pixel,
}

/// Centre-aligned mapping of an input pixel into a map of the given stride,
/// `(row + 0.5) / stride - 0.5`, clamped to the map's extent.
pub fn map_coordinate(pixel: Pixel, stride: usize, map_size: (usize, usize)) -> (f64, f64) {
    let s = stride as f64;
    let project =
        |p: usize, extent: usize| ((p as f64 + 0.5) / s - 0.5).clamp(0.0, (extent - 1) as f64);
    (project(pixel.0, map_size.0), project(pixel.1, map_size.1))
}

/// The (up to) four cells around `at` with standard bilinear weights.
pub fn bilinear_taps(at: (f64, f64), height: usize, width: usize) -> Result<[(usize, f64); 4]> {
    let (r, c) = at;
    let in_range = |v: f64, extent: usize| v.is_finite() && v >= 0.0 && v <= (extent - 1) as f64;
    if !in_range(r, height) || !in_range(c, width) {
        return Err(Error::invalid(
            "bilinear_sample",
            format!(
                "coordinate ({r}, {c}) outside [0, {}] x [0, {}]",
                height - 1,
                width - 1
            ),
        ));
    }
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(height - 1), (c0 + 1).min(width - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    Ok([
        (r0 * width + c0, (1.0 - fr) * (1.0 - fc)),
        (r0 * width + c1, (1.0 - fr) * fc),
        (r1 * width + c0, fr * (1.0 - fc)),
        (r1 * width + c1, fr * fc),
    ])
}

/// Per-channel bilinear interpolation of a `[C, H, W]` map.
pub fn bilinear_sample(map: &Tensor, at: (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = map_dims(map.shape())?;
    let mut taps = Taps::with_capacity(1);
    taps.push_point(bilinear_taps(at, h, w)?);
    Ok(Tensor::from_parts(
        vec![c],
        kernels::gather_weighted(map.data(), c, h * w, &taps),
    ))
}

fn map_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::shape("bilinear_sample", "map rank", 3, shape.len()));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Interpolation stencils for `pixels` on one level.
pub fn level_taps(
    pixels: &[Pixel],
    stride: usize,
    map_size: (usize, usize),
    input_size: (usize, usize),
) -> Result<Taps> {
    let mut taps = Taps::with_capacity(pixels.len());
    for &pixel in pixels {
        if pixel.0 >= input_size.0 || pixel.1 >= input_size.1 {
            return Err(Error::invalid(
                "extract_hypercolumns",
                format!(
                    "pixel {pixel:?} outside {}x{} input",
                    input_size.0, input_size.1
                ),
            ));
        }
        let at = map_coordinate(pixel, stride, map_size);
        taps.push_point(bilinear_taps(at, map_size.0, map_size.1)?);
    }
    Ok(taps)
}

/// `[P, F]` matrix whose row `p` is the hypercolumn of `pixels[p]`.
pub fn extract_hypercolumns(pyramid: &FeaturePyramid, pixels: &[Pixel]) -> Result<Tensor> {
    let width = pyramid.width();
    let mut out = vec![0.0; pixels.len() * width];
    let mut offset = 0;
    for level in &pyramid.levels {
        let (c, h, w) = map_dims(level.map.shape())?;
        let taps = level_taps(pixels, level.stride, (h, w), pyramid.input_size())?;
        let block = kernels::gather_weighted(level.map.data(), c, h * w, &taps);
        for (p, row) in block.chunks_exact(c).enumerate() {
            out[p * width + offset..p * width + offset + c].copy_from_slice(row);
        }
        offset += c;
    }
    Ok(Tensor::from_parts(vec![pixels.len(), width], out))
}

/// Recorded (differentiable) counterpart of [`extract_hypercolumns`]; `levels`
/// pairs each tapped map on the tape with its stride.
pub fn extract_on_tape(
    tape: &mut Tape,
    levels: &[(Var, usize)],
    input_size: (usize, usize),
    pixels: &[Pixel],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(levels.len());
    for &(map, stride) in levels {
        let shape = tape.value(map).shape().to_vec();
        check_level(&shape, stride, input_size.0, input_size.1)?;
        let taps = level_taps(pixels, stride, (shape[1], shape[2]), input_size)?;
        parts.push(tape.gather(map, taps)?);
    }
    tape.concat_cols(&parts)
}
