//! A tiny anchor-free detector with one swappable pooling slot.
//!
//! Topology: 3x3 stem conv (stride 2) → ReLU → pooling slot (3x3, stride
//! 2, padding 1) → three 3x3 conv-ReLU stages (the second with stride 2) →
//! 1x1 head producing objectness, class logits and box distances on an
//! 8-pixel grid. The slot can also sit after the first stage.

mod checkpoint;
mod head;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskpool::{self, BinaryMask, BranchRecord, MaskError, MaskPyramid};
use crate::scenegen::ImageRecord;
use crate::tensor::{
    avgpool2d_backward, avgpool2d_forward, conv2d_backward, conv2d_forward, maxpool2d_backward,
    maxpool2d_forward, relu_backward, relu_forward, LayerParams, PoolGeometry, Tensor, TensorError,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use head::{assign_targets, compute_loss, decode, nms, LossBreakdown, Targets};
pub use train::{train, LossRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum DetError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("the mask pooling variant needs a mask for every image")]
    MissingMasks,
    #[error("backward called without a matching forward cache: {0}")]
    MissingCache(&'static str),
    #[error("non-finite value at iteration {iteration} in {layer}")]
    NonFinite { iteration: u64, layer: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T, E = DetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingVariant {
    Max,
    Avg,
    Mask,
}

impl PoolingVariant {
    pub const ALL: [PoolingVariant; 3] = [PoolingVariant::Max, PoolingVariant::Avg, PoolingVariant::Mask];

    pub fn name(self) -> &'static str {
        match self {
            PoolingVariant::Max => "max",
            PoolingVariant::Avg => "avg",
            PoolingVariant::Mask => "mask",
        }
    }
}

/// Where the pooling slot sits in the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolPlacement {
    #[default]
    PostStem,
    PostStage1,
}

/// Where background activation scaling is applied during inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BgScaleSite {
    /// The pooling slot's input only.
    #[default]
    PoolInput,
    /// The pooling slot's input and the input of every later layer.
    AllStages,
}

pub const POOL_GEOMETRY: PoolGeometry = PoolGeometry {
    kernel: 3,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub pooling_variant: PoolingVariant,
    /// Output channels of stem, stage 1, stage 2 and stage 3.
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub grid_stride: usize,
    pub num_classes: usize,
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub placement: PoolPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pooling_variant: PoolingVariant::Mask,
            channels: vec![16, 24, 32, 32],
            image_size: 128,
            grid_stride: 8,
            num_classes: 3,
            score_threshold: 0.01,
            nms_iou: 0.5,
            placement: PoolPlacement::PostStem,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetError::Config(m));
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return bad(format!("channels must be 4 positive ints, got {:?}", self.channels));
        }
        if self.grid_stride != 8 {
            return bad(format!("grid_stride is fixed by the topology at 8, got {}", self.grid_stride));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.grid_stride) {
            return bad(format!(
                "image_size {} must be a positive multiple of grid_stride {}",
                self.image_size, self.grid_stride
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("score_threshold and nms_iou must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.grid_stride
    }

    /// Stride of the feature map entering the pooling slot.
    pub fn slot_stride(&self) -> usize {
        2
    }

    /// Mask strides the forward pass may need.
    pub fn pyramid_strides(&self) -> [usize; 3] {
        [2, 4, 8]
    }
}

/// Head outputs; `box_reg` holds (l, t, r, b) pixel distances from each
/// cell centre.
#[derive(Clone, Debug, PartialEq)]
pub struct DetHeadOutput {
    pub objectness: Tensor,
    pub class_logits: Tensor,
    pub box_reg: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub name: String,
    pub params: LayerParams,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Step {
    Conv(usize),
    Pool,
}

/// Prior probability used to initialize the objectness bias.
const OBJECTNESS_PRIOR: f64 = 0.01;
/// Initial box distance in grid cells.
const BOX_PRIOR: f32 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub(crate) layers: Vec<ConvLayer>,
}

/// Per-call inference knobs.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// One pyramid per image (required for the mask variant and for
    /// background scaling).
    pub masks: Option<&'a [MaskPyramid]>,
    /// Background activation weight; `None` leaves activations untouched.
    pub bg_weight: Option<f32>,
    pub bg_site: BgScaleSite,
    /// Replaces the masks consumed by the mask pooling slot (the
    /// background-scaling masks are unaffected).
    pub pool_masks: Option<&'a [BinaryMask]>,
}

enum PoolCache {
    Max(Vec<usize>),
    Avg,
    Mask(BranchRecord, Vec<BinaryMask>),
}

/// Everything the backward pass needs from a training forward pass.
pub struct ForwardCache {
    /// Input of each conv layer.
    conv_inputs: Vec<Tensor>,
    /// Post-ReLU output of each conv layer (for the ReLU mask).
    conv_outputs: Vec<Tensor>,
    pool_input_shape: [usize; 4],
    pool: PoolCache,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config.channels;
        let head_out = 1 + config.num_classes + 4;
        let spec: [(&str, usize, usize, usize, usize, bool); 5] = [
            ("stem", 3, c[0], 3, 2, true),
            ("stage1", c[0], c[1], 3, 1, true),
            ("stage2", c[1], c[2], 3, 2, true),
            ("stage3", c[2], c[3], 3, 1, true),
            ("head", c[3], head_out, 1, 1, false),
        ];
        let mut layers: Vec<ConvLayer> = spec
            .iter()
            .map(|&(name, ic, oc, k, stride, relu)| ConvLayer {
                name: name.to_string(),
                params: LayerParams::he_init(oc, ic, k, &mut rng),
                stride,
                padding: k / 2,
                relu,
            })
            .collect();
        let head = &mut layers[4].params;
        // Small head weights and a rare-object prior keep early training stable.
        head.weights.data_mut().iter_mut().for_each(|w| *w *= 0.1);
        head.bias.data_mut()[0] = (OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)).ln() as f32;
        let box_start = 1 + config.num_classes;
        head.bias.data_mut()[box_start..].fill(BOX_PRIOR);
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> PoolingVariant {
        self.config.pooling_variant
    }

    /// Same parameters, different pooling rule.
    pub fn with_variant(&self, variant: PoolingVariant) -> Model {
        let mut m = self.clone();
        m.config.pooling_variant = variant;
        m
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.param_count()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.layers.iter_mut().map(|l| &mut l.params)
    }

    /// `(name, tensor)` for every weight and bias, in layer order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), &l.params.weights),
                    (format!("{}.bias", l.name), &l.params.bias),
                ]
            })
            .collect()
    }

    fn steps(&self) -> Vec<Step> {
        let pool_after = match self.config.placement {
            PoolPlacement::PostStem => 0,
            PoolPlacement::PostStage1 => 1,
        };
        let mut steps = Vec::new();
        for i in 0..self.layers.len() {
            steps.push(Step::Conv(i));
            if i == pool_after {
                steps.push(Step::Pool);
            }
        }
        steps
    }

    fn slot_masks(&self, n: usize, opts: &ForwardOptions) -> Result<Vec<BinaryMask>> {
        if let Some(m) = opts.pool_masks {
            if m.len() != n {
                return Err(DetError::MissingMasks);
            }
            return Ok(m.to_vec());
        }
        let pyramids = opts.masks.ok_or(DetError::MissingMasks)?;
        if pyramids.len() != n {
            return Err(DetError::MissingMasks);
        }
        pyramids
            .iter()
            .map(|p| p.level(self.config.slot_stride()).cloned().ok_or(DetError::MissingMasks))
            .collect()
    }

    /// Background scaling of an activation at `stride`, if requested.
    fn maybe_scale(&self, x: Tensor, stride: usize, opts: &ForwardOptions) -> Result<Tensor> {
        let Some(w) = opts.bg_weight else {
            return Ok(x);
        };
        let pyramids = opts.masks.ok_or(DetError::MissingMasks)?;
        let masks: Vec<&BinaryMask> = pyramids
            .iter()
            .map(|p| p.level(stride).ok_or(DetError::MissingMasks))
            .collect::<Result<_>>()?;
        Ok(maskpool::bg_scale(&x, &masks, w)?)
    }

    fn forward_impl(
        &self,
        images: &Tensor,
        opts: &ForwardOptions,
        mut cache: Option<&mut ForwardCache>,
    ) -> Result<DetHeadOutput> {
        let n = images.n();
        let mut x = images.clone();
        let mut stride = 1;
        let mut seen_pool = false;
        for step in self.steps() {
            match step {
                Step::Conv(i) => {
                    let layer = &self.layers[i];
                    if seen_pool && opts.bg_site == BgScaleSite::AllStages {
                        x = self.maybe_scale(x, stride, opts)?;
                    }
                    let out = conv2d_forward(&x, &layer.params, layer.stride, layer.padding)
                        .map_err(|e| non_finite(e, &layer.name))?;
                    let out = if layer.relu { relu_forward(&out) } else { out };
                    stride *= layer.stride;
                    if let Some(c) = cache.as_deref_mut() {
                        c.conv_inputs.push(std::mem::replace(&mut x, out.clone()));
                        c.conv_outputs.push(out);
                    } else {
                        x = out;
                    }
                }
                Step::Pool => {
                    seen_pool = true;
                    x = self.maybe_scale(x, stride, opts)?;
                    let input_shape = x.shape();
                    let (out, pc) = match self.config.pooling_variant {
                        PoolingVariant::Max => {
                            let (o, am) = maxpool2d_forward(&x, POOL_GEOMETRY)?;
                            (o, PoolCache::Max(am))
                        }
                        PoolingVariant::Avg => (avgpool2d_forward(&x, POOL_GEOMETRY)?, PoolCache::Avg),
                        PoolingVariant::Mask => {
                            let masks = self.slot_masks(n, opts)?;
                            let (o, rec) = maskpool::maskpool2d_forward(&x, &masks, POOL_GEOMETRY)?;
                            (o, PoolCache::Mask(rec, masks))
                        }
                    };
                    stride *= POOL_GEOMETRY.stride;
                    if let Some(c) = cache.as_deref_mut() {
                        c.pool_input_shape = input_shape;
                        c.pool = pc;
                    }
                    x = out;
                }
            }
        }
        let parts = x.split_channels(&[1, self.config.num_classes, 4])?;
        let [objectness, class_logits, raw_box]: [Tensor; 3] = parts.try_into().expect("three parts");
        let scale = self.config.grid_stride as f32;
        Ok(DetHeadOutput {
            objectness,
            class_logits,
            box_reg: raw_box.map(|v| v * scale),
        })
    }

    /// Inference forward pass over an `(n, 3, s, s)` batch.
    pub fn forward(&self, images: &Tensor, opts: &ForwardOptions) -> Result<DetHeadOutput> {
        self.forward_impl(images, opts, None)
    }

    /// Forward pass that keeps what [`Model::backward`] needs.
    pub fn forward_train(&self, images: &Tensor, opts: &ForwardOptions) -> Result<(DetHeadOutput, ForwardCache)> {
        let mut cache = ForwardCache {
            conv_inputs: Vec::new(),
            conv_outputs: Vec::new(),
            pool_input_shape: [0; 4],
            pool: PoolCache::Avg,
        };
        let out = self.forward_impl(images, opts, Some(&mut cache))?;
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for the head gradient `grad`.
    pub fn backward(&mut self, cache: &ForwardCache, grad: &DetHeadOutput) -> Result<()> {
        if cache.conv_inputs.len() != self.layers.len() {
            return Err(DetError::MissingCache("conv activations"));
        }
        let scale = self.config.grid_stride as f32;
        let box_grad = grad.box_reg.map(|v| v * scale);
        let mut g = Tensor::concat_channels(&[&grad.objectness, &grad.class_logits, &box_grad])?;
        let steps = self.steps();
        for step in steps.into_iter().rev() {
            match step {
                Step::Conv(i) => {
                    let layer = &mut self.layers[i];
                    if layer.relu {
                        g = relu_backward(&cache.conv_outputs[i], &g)?;
                    }
                    g = conv2d_backward(&cache.conv_inputs[i], &mut layer.params, &g, layer.stride, layer.padding)
                        .map_err(|e| non_finite(e, &layer.name))?;
                }
                Step::Pool => {
                    g = match (&cache.pool, self.config.pooling_variant) {
                        (PoolCache::Max(am), PoolingVariant::Max) => maxpool2d_backward(cache.pool_input_shape, am, &g)?,
                        (PoolCache::Avg, PoolingVariant::Avg) => {
                            avgpool2d_backward(cache.pool_input_shape, POOL_GEOMETRY, &g)?
                        }
                        (PoolCache::Mask(rec, masks), PoolingVariant::Mask) => {
                            maskpool::maskpool2d_backward(masks, &g, rec)?
                        }
                        _ => return Err(DetError::MissingCache("pooling record")),
                    };
                }
            }
        }
        Ok(())
    }

    /// Analytic `(parameter count, multiply-add count)` for one image of
    /// `image_size x image_size`.
    pub fn count_params_flops(&self, image_size: usize) -> (usize, usize) {
        let mut h = image_size;
        let mut mult_adds = 0usize;
        for step in self.steps() {
            match step {
                Step::Conv(i) => {
                    let l = &self.layers[i];
                    mult_adds += conv_mult_adds(&l.params, h, h, l.stride, l.padding);
                    h = (h + 2 * l.padding - l.params.kernel()) / l.stride + 1;
                }
                Step::Pool => {
                    let channels = self.layers[match self.config.placement {
                        PoolPlacement::PostStem => 0,
                        PoolPlacement::PostStage1 => 1,
                    }]
                    .params
                    .out_channels();
                    mult_adds += pool_mult_adds(self.config.pooling_variant, channels, h, h);
                    h = (h + 2 * POOL_GEOMETRY.padding - POOL_GEOMETRY.kernel) / POOL_GEOMETRY.stride + 1;
                }
            }
        }
        (self.param_count(), mult_adds)
    }
}

/// Multiply-adds of one conv layer on an `in_h x in_w` input.
pub fn conv_mult_adds(p: &LayerParams, in_h: usize, in_w: usize, stride: usize, padding: usize) -> usize {
    let k = p.kernel();
    let oh = (in_h + 2 * padding - k) / stride + 1;
    let ow = (in_w + 2 * padding - k) / stride + 1;
    p.out_channels() * p.in_channels() * k * k * oh * ow
}

/// Operation count of the pooling slot: max pooling compares each valid
/// window pixel; avg and mask pooling add each valid pixel and divide once
/// per window.
pub fn pool_mult_adds(variant: PoolingVariant, channels: usize, h: usize, w: usize) -> usize {
    let g = POOL_GEOMETRY;
    let axis = |len: usize| -> (usize, usize) {
        let out = (len + 2 * g.padding - g.kernel) / g.stride + 1;
        let covered = (0..out)
            .map(|o| {
                let (a, b) = crate::tensor::window_range(o, len, g.kernel, g.stride, g.padding);
                b - a
            })
            .sum();
        (out, covered)
    };
    let ((oh, vy), (ow, vx)) = (axis(h), axis(w));
    let valid = vy * vx;
    channels
        * match variant {
            PoolingVariant::Max => valid,
            PoolingVariant::Avg | PoolingVariant::Mask => valid + oh * ow,
        }
}

fn non_finite(e: TensorError, layer: &str) -> DetError {
    match e {
        TensorError::NonFinite { .. } => DetError::NonFinite {
            iteration: 0,
            layer: layer.to_string(),
        },
        other => DetError::Tensor(other),
    }
}

/// Standardized `(n, 3, h, w)` tensor from RGB records.
pub fn images_to_tensor(records: &[&ImageRecord]) -> Tensor {
    let Some(first) = records.first() else {
        return Tensor::zeros([0, 3, 0, 0]);
    };
    let (w, h) = (first.width() as usize, first.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; records.len() * 3 * plane];
    for (n, r) in records.iter().enumerate() {
        for (i, px) in r.image.pixels().enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * plane + i] = (px.0[c] as f32 / 255.0 - 0.5) / 0.25;
            }
        }
    }
    Tensor::from_vec([records.len(), 3, h, w], data).expect("sized above")
}

/// Mask pyramids at the strides the model consumes.
pub fn mask_pyramids(records: &[&ImageRecord], cfg: &ModelConfig) -> Result<Vec<MaskPyramid>> {
    records
        .iter()
        .map(|r| Ok(MaskPyramid::build(&r.fg_mask, &cfg.pyramid_strides())?))
        .collect()
}
