use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Per-channel z-score of a `[C, H, W]` image using the mean and population
/// standard deviation of the valid pixels. Invalid pixels become 0.
pub fn normalize(image: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("normalize", "image rank", 3, shape.len()));
    }
    let plane = shape[1] * shape[2];
    if let Some(v) = valid {
        if v.len() != plane {
            return Err(Error::shape("normalize", "validity length", plane, v.len()));
        }
    }
    let is_valid = |i: usize| valid.is_none_or(|v| v[i]);
    let n = (0..plane).filter(|&i| is_valid(i)).count();
    if n < 2 {
        return Err(Error::invalid(
            "normalize",
            format!("{n} valid pixels, need at least 2"),
        ));
    }

    let mut out = vec![0.0; image.numel()];
    for (channel, (src, dst)) in image
        .data()
        .chunks_exact(plane)
        .zip(out.chunks_exact_mut(plane))
        .enumerate()
    {
        let mean = (0..plane)
            .filter(|&i| is_valid(i))
            .map(|i| src[i])
            .sum::<f64>()
            / n as f64;
        let var = (0..plane)
            .filter(|&i| is_valid(i))
            .map(|i| (src[i] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if !std.is_finite() {
            return Err(Error::NonFinite(format!(
                "normalize: channel {channel} statistics"
            )));
        }
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            return Err(Error::ZeroVariance { channel });
        }
        for i in (0..plane).filter(|&i| is_valid(i)) {
            dst[i] = (src[i] - mean) / std;
        }
    }
    Tensor::new(shape, out)
}
