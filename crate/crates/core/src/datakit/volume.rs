//! `PXVOL` volume container.
//!
//! ```text
//! "PXVOL1\0"                  7-byte magic, the '1' is the format version
//! C, D, H, W: u32 LE each
//! image:    f32 LE * C*D*H*W   layout [C, D, H, W]
//! labels:   u8 * D*H*W         layout [D, H, W]
//! validity: u8 * D*H*W         0 = padding, 1 = valid
//! ```
//!
//! Label-only volumes (predictions) use `C = 0`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::nn::Tensor;
use crate::sampling::LabelMask;
use crate::segmenter::LabeledSlice;

use super::normalize;

pub const MAGIC: &[u8; 7] = b"PXVOL1\0";
const VERSION_OFFSET: usize = 5;
const HEADER_LEN: usize = MAGIC.len() + 16;
pub const EXTENSION: &str = "pxvol";

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    image: Vec<f32>,
    labels: Vec<u8>,
    valid: Vec<bool>,
}

impl Volume {
    /// `dims` is `(C, D, H, W)`.
    pub fn new(
        dims: (usize, usize, usize, usize),
        image: Vec<f32>,
        labels: Vec<u8>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let (c, d, h, w) = dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "volume",
                format!("empty spatial dims {d}x{h}x{w}"),
            ));
        }
        let voxels = d * h * w;
        if image.len() != c * voxels {
            return Err(Error::shape(
                "volume",
                "image payload",
                c * voxels,
                image.len(),
            ));
        }
        if labels.len() != voxels {
            return Err(Error::shape(
                "volume",
                "label payload",
                voxels,
                labels.len(),
            ));
        }
        if valid.len() != voxels {
            return Err(Error::shape(
                "volume",
                "validity payload",
                voxels,
                valid.len(),
            ));
        }
        Ok(Self {
            channels: c,
            depth: d,
            height: h,
            width: w,
            image,
            labels,
            valid,
        })
    }

    /// Label-only volume sharing `like`'s geometry and validity.
    pub fn labels_like(like: &Volume, labels: Vec<u8>) -> Result<Self> {
        Self::new(
            (0, like.depth, like.height, like.width),
            Vec::new(),
            labels,
            like.valid.clone(),
        )
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.depth, self.height, self.width)
    }

    pub fn image(&self) -> &[f32] {
        &self.image
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap::new(&[self.depth, self.height, self.width], self.labels.clone())
            .expect("dims checked")
    }

    /// Raw `[C, H, W]` intensities of slice `z`.
    pub fn slice_image(&self, z: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.channels * plane);
        for c in 0..self.channels {
            let start = (c * self.depth + z) * plane;
            data.extend(
                self.image[start..start + plane]
                    .iter()
                    .map(|&v| f64::from(v)),
            );
        }
        Tensor::new(&[self.channels, self.height, self.width], data).expect("dims checked")
    }

    pub fn slice_mask(&self, z: usize) -> LabelMask {
        let plane = self.height * self.width;
        let range = z * plane..(z + 1) * plane;
        LabelMask::new(self.height, self.width, self.labels[range.clone()].to_vec())
            .and_then(|m| m.with_validity(self.valid[range].to_vec()))
            .expect("dims checked")
    }

    /// Slice `z` with its image z-scored per channel over valid pixels.
    pub fn labeled_slice(&self, z: usize) -> Result<LabeledSlice> {
        if z >= self.depth {
            return Err(Error::invalid(
                "labeled_slice",
                format!("slice {z} of {}", self.depth),
            ));
        }
        let plane = self.height * self.width;
        let image = normalize(
            &self.slice_image(z),
            Some(&self.valid[z * plane..(z + 1) * plane]),
        )?;
        LabeledSlice::new(image, self.slice_mask(z))
    }

    pub fn labeled_slices(&self) -> Result<Vec<LabeledSlice>> {
        (0..self.depth).map(|z| self.labeled_slice(z)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.image.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(MAGIC);
        for d in [self.channels, self.depth, self.height, self.width] {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out.extend(self.valid.iter().map(|&v| u8::from(v)));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated {
                what: "magic".into(),
                needed: MAGIC.len() - bytes.len(),
            });
        }
        if bytes[..VERSION_OFFSET] != MAGIC[..VERSION_OFFSET] || bytes[MAGIC.len() - 1] != 0 {
            return Err(Error::Format("not a PXVOL volume (bad magic)".into()));
        }
        if bytes[VERSION_OFFSET] != MAGIC[VERSION_OFFSET] {
            return Err(Error::UnsupportedVersion {
                expected: MAGIC[VERSION_OFFSET],
                found: bytes[VERSION_OFFSET],
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                what: "dims".into(),
                needed: HEADER_LEN - bytes.len(),
            });
        }
        let dim = |i: usize| {
            let at = MAGIC.len() + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
        };
        let (c, d, h, w) = (dim(0), dim(1), dim(2), dim(3));
        let voxels = d
            .checked_mul(h)
            .and_then(|n| n.checked_mul(w))
            .ok_or_else(|| Error::Format(format!("dims {d}x{h}x{w} overflow")))?;
        let payload = c
            .checked_mul(voxels)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(2 * voxels))
            .ok_or_else(|| Error::Format(format!("dims {c}x{d}x{h}x{w} overflow")))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < payload {
            return Err(Error::Truncated {
                what: "volume payload".into(),
                needed: payload - body.len(),
            });
        }
        if body.len() > payload {
            return Err(Error::Format(format!(
                "{} trailing bytes after volume payload",
                body.len() - payload
            )));
        }
        let (image_bytes, rest) = body.split_at(c * voxels * 4);
        let (label_bytes, valid_bytes) = rest.split_at(voxels);
        let image = image_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let valid = valid_bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!(
                    "validity byte {other} is not 0 or 1"
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new((c, d, h, w), image, label_bytes.to_vec(), valid)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `.pxvol` files directly inside `dir`, sorted by file name.
pub fn list_volumes(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}
