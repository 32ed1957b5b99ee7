//! VGG-style backbone + hypercolumn extraction + MLP pixel classifier.
//!
//! Training looks at a sparse set of sampled pixels per slice; inference runs
//! the same per-pixel path over every pixel of the image.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercolumn::{self, FeatureLevel, FeaturePyramid, Pixel};
use crate::nn::{
    checkpoint, he_uniform, kernels, ops, ParamId, ParamStore, Sgd, SgdConfig, Tape, Tensor, Var,
};
use crate::sampling::{self, LabelMask, PixelBatch, SamplePlan, SampleStrategy, SkewFallback};

/// Rows of pixels classified together during dense inference.
pub const DENSE_TILE_ROWS: usize = 16;

/// Scale applied to the classifier head's initial weights so that the
/// untrained model starts with near-uniform class probabilities.
const HEAD_INIT_GAIN: f64 = 0.01;

const CONFIG_ENTRY: &str = "meta.config_json";
const SAMPLER_STREAM: u64 = 0x5A3D_9C1B_07E2_64F1;
const ORDER_STREAM: u64 = 0x1F0E_2D3C_4B5A_6978;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub n_convs: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub tap_stages: Vec<usize>,
    pub mlp_widths: Vec<usize>,
    pub n_classes: usize,
    pub n_sample_pixels: usize,
    pub sampler: SampleStrategy,
    pub skew_fallback: SkewFallback,
    pub ignore_label: Option<u8>,
    pub sgd: SgdConfig,
    pub iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stages: [16, 32, 64]
                .into_iter()
                .map(|width| StageConfig { n_convs: 2, width })
                .collect(),
            tap_stages: vec![0, 1, 2],
            mlp_widths: vec![64, 64],
            n_classes: 4,
            n_sample_pixels: 256,
            sampler: SampleStrategy::ClassBalanced,
            skew_fallback: SkewFallback::Replacement,
            ignore_label: None,
            sgd: SgdConfig::default(),
            iterations: 2000,
        }
    }
}

impl ModelConfig {
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
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.stages.is_empty() {
            return fail("at least one backbone stage is required".into());
        }
        if let Some(i) = self
            .stages
            .iter()
            .position(|s| s.n_convs == 0 || s.width == 0)
        {
            return fail(format!("stage {i} needs n_convs >= 1 and width >= 1"));
        }
        if self.tap_stages.is_empty() {
            return fail("tap_stages must not be empty".into());
        }
        if let Some(&t) = self.tap_stages.iter().find(|&&t| t >= self.stages.len()) {
            return fail(format!(
                "tap stage {t} out of range for {} stages",
                self.stages.len()
            ));
        }
        if self.tap_stages.windows(2).any(|w| w[0] >= w[1]) {
            return fail("tap_stages must be strictly increasing".into());
        }
        if self.mlp_widths.contains(&0) {
            return fail("mlp widths must be positive".into());
        }
        if !(1..=256).contains(&self.n_classes) {
            return fail(format!(
                "n_classes must lie in 1..=256, got {}",
                self.n_classes
            ));
        }
        if self.n_sample_pixels == 0 {
            return fail("n_sample_pixels must be positive".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        self.sgd.validate()
    }

    /// Hypercolumn width: total channels over the tapped stages.
    pub fn descriptor_width(&self) -> usize {
        self.tap_stages.iter().map(|&t| self.stages[t].width).sum()
    }

    /// Pooling steps applied before the deepest tapped stage.
    pub fn pool_count(&self) -> usize {
        *self.tap_stages.last().expect("validated")
    }

    pub fn sample_plan(&self, seed: u64) -> SamplePlan {
        SamplePlan {
            n_total: self.n_sample_pixels,
            strategy: self.sampler,
            seed,
            ignore_label: self.ignore_label,
            skew_fallback: self.skew_fallback,
        }
    }
}

/// One training or evaluation sample: a normalised `[C, H, W]` image and its
/// label mask (which carries the validity mask).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub image: Tensor,
    pub mask: LabelMask,
}

impl LabeledSlice {
    pub fn new(image: Tensor, mask: LabelMask) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::shape("labeled_slice", "image rank", 3, shape.len()));
        }
        if shape[1] != mask.height() {
            return Err(Error::shape(
                "labeled_slice",
                "height",
                shape[1],
                mask.height(),
            ));
        }
        if shape[2] != mask.width() {
            return Err(Error::shape(
                "labeled_slice",
                "width",
                shape[2],
                mask.width(),
            ));
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

struct ConvLayer {
    weights: ParamId,
    bias: ParamId,
}

struct Linear {
    weights: ParamId,
    bias: ParamId,
}

pub struct Segmenter {
    config: ModelConfig,
    params: ParamStore,
    backbone: Vec<Vec<ConvLayer>>,
    mlp: Vec<Linear>,
}

/// Full-image prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePrediction {
    /// Row-major `[H, W]` argmax labels.
    pub labels: Vec<u8>,
    /// `[n_classes, H, W]` softmax probabilities.
    pub probs: Tensor,
    /// `[H * W, n_classes]` raw logits, row per pixel.
    pub logits: Tensor,
}

impl Segmenter {
    /// Fresh model with He-uniform weights drawn from `config.sgd.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.sgd.seed);
        let mut params = ParamStore::new();

        let mut backbone = Vec::with_capacity(config.stages.len());
        let mut c_in = config.in_channels;
        for (si, stage) in config.stages.iter().enumerate() {
            let mut layers = Vec::with_capacity(stage.n_convs);
            for ci in 0..stage.n_convs {
                let fan_in = c_in * 9;
                let w = he_uniform(&[stage.width, c_in, 3, 3], fan_in, &mut rng);
                layers.push(ConvLayer {
                    weights: params.add(format!("backbone.{si}.{ci}.weight"), w),
                    bias: params.add(
                        format!("backbone.{si}.{ci}.bias"),
                        Tensor::zeros(&[stage.width]),
                    ),
                });
                c_in = stage.width;
            }
            backbone.push(layers);
        }

        let mut mlp = Vec::new();
        let mut f_in = config.descriptor_width();
        let widths = config.mlp_widths.iter().copied().chain([config.n_classes]);
        let n_layers = config.mlp_widths.len() + 1;
        for (li, f_out) in widths.enumerate() {
            let mut w = he_uniform(&[f_out, f_in], f_in, &mut rng);
            if li + 1 == n_layers {
                w.data_mut().iter_mut().for_each(|v| *v *= HEAD_INIT_GAIN);
            }
            mlp.push(Linear {
                weights: params.add(format!("mlp.{li}.weight"), w),
                bias: params.add(format!("mlp.{li}.bias"), Tensor::zeros(&[f_out])),
            });
            f_in = f_out;
        }

        Ok(Self {
            config,
            params,
            backbone,
            mlp,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::shape("segmenter", "image rank", 3, shape.len()));
        }
        if shape[0] != self.config.in_channels {
            return Err(Error::shape(
                "segmenter",
                "image channels",
                self.config.in_channels,
                shape[0],
            ));
        }
        let min = 1usize << self.config.pool_count();
        if shape[1] < min || shape[2] < min {
            return Err(Error::invalid(
                "segmenter",
                format!(
                    "image {}x{} smaller than {min}x{min} required by {} pooling steps",
                    shape[1],
                    shape[2],
                    self.config.pool_count()
                ),
            ));
        }
        Ok((shape[1], shape[2]))
    }

    /// Records the backbone up to the deepest tapped stage; returns the tapped
    /// maps with their strides.
    pub fn backbone_on_tape(&self, tape: &mut Tape, image: &Tensor) -> Result<Vec<(Var, usize)>> {
        self.check_image(image)?;
        let mut x = tape.leaf(image.clone());
        let mut stride = 1;
        let mut taps = Vec::with_capacity(self.config.tap_stages.len());
        for si in 0..=self.config.pool_count() {
            if si > 0 {
                x = tape.maxpool2x2(x)?;
                stride *= 2;
            }
            for layer in &self.backbone[si] {
                let w = tape.param(&self.params, layer.weights);
                let b = tape.param(&self.params, layer.bias);
                let conv = tape.conv3x3(x, w, b)?;
                x = tape.relu(conv);
            }
            if self.config.tap_stages.contains(&si) {
                taps.push((x, stride));
            }
        }
        Ok(taps)
    }

    pub fn mlp_on_tape(&self, tape: &mut Tape, descriptors: Var) -> Result<Var> {
        let mut h = descriptors;
        for (li, layer) in self.mlp.iter().enumerate() {
            let w = tape.param(&self.params, layer.weights);
            let b = tape.param(&self.params, layer.bias);
            h = tape.linear(h, w, b)?;
            if li + 1 < self.mlp.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Differentiable logits `[P, n_classes]` for the given pixels.
    pub fn forward_sparse(&self, tape: &mut Tape, image: &Tensor, pixels: &[Pixel]) -> Result<Var> {
        let (h, w) = self.check_image(image)?;
        let levels = self.backbone_on_tape(tape, image)?;
        let descriptors = hypercolumn::extract_on_tape(tape, &levels, (h, w), pixels)?;
        self.mlp_on_tape(tape, descriptors)
    }

    /// Logits for the given pixels, without keeping the tape.
    pub fn sparse_logits(&self, image: &Tensor, pixels: &[Pixel]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.forward_sparse(&mut tape, image, pixels)?;
        Ok(tape.value(logits).clone())
    }

    /// Tape-free backbone pass producing the tapped feature pyramid.
    pub fn feature_pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (h, w) = self.check_image(image)?;
        let mut x = image.clone();
        let mut stride = 1;
        let mut levels = Vec::with_capacity(self.config.tap_stages.len());
        for si in 0..=self.config.pool_count() {
            if si > 0 {
                x = ops::maxpool2x2_forward(&x)?;
                stride *= 2;
            }
            for layer in &self.backbone[si] {
                let conv = ops::conv2d_forward(
                    &x,
                    self.params.get(layer.weights),
                    self.params.get(layer.bias),
                )?;
                x = ops::relu_forward(&conv);
            }
            if self.config.tap_stages.contains(&si) {
                levels.push(FeatureLevel {
                    map: x.clone(),
                    stride,
                });
            }
        }
        FeaturePyramid::new(levels, h, w)
    }

    /// Tape-free MLP over a `[P, F]` descriptor matrix.
    pub fn classify(&self, descriptors: &Tensor) -> Result<Tensor> {
        let mut h = descriptors.clone();
        for (li, layer) in self.mlp.iter().enumerate() {
            h = ops::linear_forward(
                &h,
                self.params.get(layer.weights),
                self.params.get(layer.bias),
            )?;
            if li + 1 < self.mlp.len() {
                h = ops::relu_forward(&h);
            }
        }
        Ok(h)
    }

    pub fn predict_dense(&self, image: &Tensor) -> Result<DensePrediction> {
        self.predict_dense_tiled(image, DENSE_TILE_ROWS)
    }

    /// Dense inference, classifying `tile_rows` image rows at a time.
    pub fn predict_dense_tiled(&self, image: &Tensor, tile_rows: usize) -> Result<DensePrediction> {
        if tile_rows == 0 {
            return Err(Error::invalid(
                "predict_dense",
                "tile_rows must be positive",
            ));
        }
        let (h, w) = self.check_image(image)?;
        let k = self.config.n_classes;
        let pyramid = self.feature_pyramid(image)?;
        let mut logits = Vec::with_capacity(h * w * k);
        for r0 in (0..h).step_by(tile_rows) {
            let r1 = (r0 + tile_rows).min(h);
            let pixels: Vec<Pixel> = (r0..r1).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
            let descriptors = hypercolumn::extract_hypercolumns(&pyramid, &pixels)?;
            logits.extend_from_slice(self.classify(&descriptors)?.data());
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predict_dense logits".into()));
        }
        let probs_rows = kernels::softmax_rows(&logits, h * w, k);
        let mut probs = vec![0.0; k * h * w];
        let mut labels = Vec::with_capacity(h * w);
        for (p, row) in probs_rows.chunks_exact(k).enumerate() {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                probs[c * h * w + p] = v;
                if v > row[best] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
        Ok(DensePrediction {
            labels,
            probs: Tensor::from_parts(vec![k, h, w], probs),
            logits: Tensor::from_parts(vec![h * w, k], logits),
        })
    }

    /// Dense labels with padding (invalid) pixels forced to background.
    pub fn segment(&self, slice: &LabeledSlice) -> Result<Vec<u8>> {
        let mut labels = self.predict_dense(&slice.image)?.labels;
        if let Some(valid) = slice.mask.validity() {
            for (l, &v) in labels.iter_mut().zip(valid) {
                if !v {
                    *l = 0;
                }
            }
        }
        Ok(labels)
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let config_bytes: Vec<f64> = self.config.to_json().bytes().map(f64::from).collect();
        let config_dims = [config_bytes.len()];
        let entries = std::iter::once((CONFIG_ENTRY, &config_dims[..], &config_bytes[..]))
            .chain(self.params.iter().map(|(n, t)| (n, t.shape(), t.data())));
        checkpoint::encode(entries)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = checkpoint::decode(bytes)?;
        let config_entry = entries
            .iter()
            .find(|e| e.name == CONFIG_ENTRY)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {CONFIG_ENTRY} entry")))?;
        let json: Vec<u8> = config_entry
            .data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Format("config entry holds non-byte values".into()))
                }
            })
            .collect::<Result<_>>()?;
        let json = String::from_utf8(json)
            .map_err(|_| Error::Format("config entry is not UTF-8".into()))?;
        let mut model = Self::new(ModelConfig::from_json(&json)?)?;

        let expected = model.params.len();
        let mut seen = 0;
        for entry in entries.iter().filter(|e| e.name != CONFIG_ENTRY) {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {}", entry.name)))?;
            let tensor = model.params.get_mut(id);
            if tensor.shape() != entry.dims.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has dims {:?}, model expects {:?}",
                    entry.name,
                    entry.dims,
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&entry.data);
            seen += 1;
        }
        if seen != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {seen} of {expected} parameters"
            )));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// A model together with its optimiser state and step counter.
pub struct Trainer {
    model: Segmenter,
    sgd: Sgd,
    step: u64,
}

impl Trainer {
    pub fn new(model: Segmenter) -> Result<Self> {
        let sgd = Sgd::new(model.config.sgd.clone())?;
        Ok(Self {
            model,
            sgd,
            step: 0,
        })
    }

    pub fn model(&self) -> &Segmenter {
        &self.model
    }

    pub fn into_model(self) -> Segmenter {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Pixel batch the next [`Trainer::train_step`] would draw from `slice`.
    pub fn next_batch(&self, slice: &LabeledSlice) -> Result<PixelBatch> {
        let plan = self
            .model
            .config
            .sample_plan(self.model.config.sgd.seed ^ SAMPLER_STREAM);
        sampling::sample(&slice.mask, &plan.for_image(self.step))
    }

    /// Sample, forward, cross-entropy, backward; gradients are added to the
    /// parameters' grad slots. Returns the loss.
    pub fn accumulate_gradients(&mut self, slice: &LabeledSlice) -> Result<f64> {
        let n_classes = self.model.config.n_classes;
        if let Some(&bad) = slice
            .mask
            .labels()
            .iter()
            .find(|&&l| l as usize >= n_classes)
        {
            return Err(Error::invalid(
                "train_step",
                format!("label {bad} out of range for {n_classes} classes"),
            ));
        }
        let batch = self.next_batch(slice)?;
        let targets: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();

        let mut tape = Tape::new();
        let logits = self
            .model
            .forward_sparse(&mut tape, &slice.image, &batch.coords)?;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut self.model.params);
        Ok(loss_value)
    }

    /// SGD update from the accumulated gradients, then clears them and
    /// advances the step counter.
    pub fn apply_update(&mut self) -> Result<()> {
        self.sgd.step(&mut self.model.params);
        if let Some((name, _)) = self.model.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name} after SGD step")));
        }
        self.model.params.zero_grad();
        self.step += 1;
        Ok(())
    }

    /// One full training step. Returns the loss before the update.
    pub fn train_step(&mut self, slice: &LabeledSlice) -> Result<f64> {
        self.model.params.zero_grad();
        let loss = self.accumulate_gradients(slice)?;
        self.apply_update()?;
        Ok(loss)
    }

    /// Runs `iterations` steps, visiting slices in seeded shuffled epochs.
    /// Returns the per-step losses.
    pub fn train(
        &mut self,
        slices: &[LabeledSlice],
        iterations: usize,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<Vec<f64>> {
        if slices.is_empty() {
            return Err(Error::invalid("train", "no training slices"));
        }
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(iterations);
        let mut epoch = 0u64;
        while losses.len() < iterations {
            if order.is_empty() {
                order = (0..slices.len()).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.model.config.sgd.seed ^ ORDER_STREAM ^ epoch);
                order.shuffle(&mut rng);
                order.reverse();
                epoch += 1;
            }
            let idx = order.pop().expect("non-empty order");
            let loss = self.train_step(&slices[idx])?;
            on_step(self.step - 1, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}
