//! The saccade attention network: a residual CNN emitting one logit per patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{he_normal, normal, Bound, ParamSet};
use crate::rng::Rng;
use crate::rollout::topk_indices;
use crate::tape::{Conv2dSpec, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub stages: Vec<Stage>,
    pub input_size: usize,
    /// Output logits, one per student patch.
    pub num_patches: usize,
    pub k: usize,
    /// Stem downsampling. 1 is a 3×3 conv; s > 1 is an s×s conv with stride s.
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    /// Weight on the positive BCE term; 1 leaves positives and negatives equal.
    #[serde(default = "default_pos_weight")]
    pub pos_weight: f32,
}

fn default_stem_stride() -> usize {
    2
}

fn default_pos_weight() -> f32 {
    1.0
}

impl SelectorConfig {
    /// The default backbone: three stages of two residual blocks.
    pub fn desk(input_size: usize, num_patches: usize, k: usize) -> Self {
        Self {
            stages: vec![
                Stage { channels: 32, blocks: 2 },
                Stage { channels: 64, blocks: 2 },
                Stage { channels: 128, blocks: 2 },
            ],
            input_size,
            num_patches,
            k,
            stem_stride: default_stem_stride(),
            pos_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0) {
            return Err(Error::Config("selector needs non-empty stages with positive sizes".into()));
        }
        if self.k == 0 || self.k > self.num_patches {
            return Err(Error::Config(format!(
                "selector k = {} outside 1..={}",
                self.k, self.num_patches
            )));
        }
        if self.stem_stride == 0 || !self.input_size.is_multiple_of(self.stem_stride) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by stem stride {}",
                self.input_size, self.stem_stride
            )));
        }
        let mut size = self.input_size / self.stem_stride;
        for _ in 1..self.stages.len() {
            if !size.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "feature map of {size}px cannot be halved; adjust input_size or stages"
                )));
            }
            size /= 2;
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config("pos_weight must be positive".into()));
        }
        Ok(())
    }

    /// Every convolution in forward order.
    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        let mut layers = Vec::new();
        let mut size = self.input_size;
        let c0 = self.stages[0].channels;
        let (k, stride, pad) = if self.stem_stride == 1 {
            (3, 1, 1)
        } else {
            (self.stem_stride, self.stem_stride, 0)
        };
        layers.push(ConvLayer::new("stem", 3, c0, k, stride, pad, size));
        size /= self.stem_stride;
        let mut c_in = c0;
        for (si, stage) in self.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let name = format!("stages.{si}.{bi}");
                let down = si > 0 && bi == 0;
                if down {
                    // 4×4 stride-2 pad-1 halves even sizes exactly
                    layers.push(ConvLayer::new(format!("{name}.conv1"), c_in, stage.channels, 4, 2, 1, size));
                } else {
                    layers.push(ConvLayer::new(format!("{name}.conv1"), c_in, stage.channels, 3, 1, 1, size));
                }
                let out = if down { size / 2 } else { size };
                layers.push(ConvLayer::new(format!("{name}.conv2"), stage.channels, stage.channels, 3, 1, 1, out));
                if down || c_in != stage.channels {
                    let (pk, ps) = if down { (2, 2) } else { (1, 1) };
                    layers.push(ConvLayer::new(format!("{name}.proj"), c_in, stage.channels, pk, ps, 0, size));
                }
                size = out;
                c_in = stage.channels;
            }
        }
        layers
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }
}

/// One convolution of the selector, with bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_size: usize,
    pub out_size: usize,
}

impl ConvLayer {
    fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, in_size: usize) -> Self {
        let out_size = (in_size + 2 * padding - kernel) / stride + 1;
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            in_size,
            out_size,
        }
    }

    fn spec(&self) -> Conv2dSpec {
        Conv2dSpec {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

pub fn init_params(config: &SelectorConfig, rng: &mut Rng) -> Result<ParamSet> {
    config.validate()?;
    let mut params = ParamSet::new();
    for layer in config.conv_layers() {
        let fan_in = layer.c_in * layer.kernel * layer.kernel;
        let shape = [layer.c_out, layer.c_in, layer.kernel, layer.kernel];
        let mut w = he_normal(rng, &shape, fan_in);
        if layer.name.ends_with("conv2") {
            // damp the residual branch so deep stacks start near identity
            w.data_mut().iter_mut().for_each(|v| *v *= 0.25);
        }
        params.insert(format!("{}.w", layer.name), w);
        params.insert(format!("{}.b", layer.name), Tensor::zeros(&[layer.c_out]));
    }
    let c = config.final_channels();
    params.insert("head.w", normal(rng, &[c, config.num_patches], 0.02));
    params.insert("head.b", Tensor::zeros(&[config.num_patches]));
    Ok(params)
}

fn conv<T: Scalar>(tape: &mut Tape<T>, p: &Bound, layer: &ConvLayer, x: Var) -> Result<Var> {
    let w = p.var(&format!("{}.w", layer.name))?;
    let b = p.var(&format!("{}.b", layer.name))?;
    tape.conv2d(x, w, Some(b), layer.spec())
}

/// Batched forward: `images` are `3×S×S`; returns `[B, N]` raw logits.
pub fn forward_batch<T: Scalar>(tape: &mut Tape<T>, p: &Bound, config: &SelectorConfig, images: &[&Tensor<f32>]) -> Result<Var> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let s = config.input_size;
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    for img in images {
        if img.shape() != [3, s, s] {
            return Err(Error::shape(
                "selector_forward",
                format!("image {:?} for input size {s}", img.shape()),
            ));
        }
        data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let x = tape.constant(Tensor::new(vec![images.len(), 3, s, s], data)?);
    let layers = config.conv_layers();
    let mut it = layers.iter().peekable();
    let stem = it.next().expect("stem");
    let mut x = conv(tape, p, stem, x)?;
    x = tape.relu(x)?;
    while let Some(conv1) = it.next() {
        let conv2 = it.next().expect("conv2 follows conv1");
        let proj = match it.peek() {
            Some(l) if l.name.ends_with(".proj") => it.next(),
            _ => None,
        };
        let h = conv(tape, p, conv1, x)?;
        let h = tape.relu(h)?;
        let h = conv(tape, p, conv2, h)?;
        let skip = match proj {
            Some(layer) => conv(tape, p, layer, x)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        x = tape.relu(sum)?;
    }
    let pooled = tape.global_avg_pool(x)?;
    let logits = tape.matmul(pooled, p.var("head.w")?)?;
    tape.add_broadcast(logits, p.var("head.b")?)
}

/// Single-image inference.
pub fn selector_forward(image: &Tensor<f32>, params: &ParamSet, config: &SelectorConfig) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let logits = forward_batch(&mut tape, &bound, config, &[image])?;
    tape.value(logits).clone().reshape(&[config.num_patches])
}

/// Batched inference, `[B, N]` logits.
pub fn predict_logits(images: &[&Tensor<f32>], params: &ParamSet, config: &SelectorConfig) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let logits = forward_batch(&mut tape, &bound, config, images)?;
    Ok(tape.value(logits).clone())
}

/// Unweighted mean BCE over all patch positions.
pub fn selector_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, multi_hot: &[u8], pos_weight: f32) -> Result<Var> {
    let targets: Vec<T> = multi_hot.iter().map(|&v| T::from_f64(v as f64)).collect();
    tape.bce_with_logits(logits, &targets, T::from_f64(pos_weight as f64))
}

/// The k highest-scoring patches, ascending. Sigmoid is monotone, so logits suffice.
pub fn predict_topk(logits: &[f32], k: usize) -> Result<Vec<usize>> {
    topk_indices(logits, k)
}

/// Threshold-0.5 confusion counts and top-k overlap for the selector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectorMetrics {
    pub per_patch_accuracy: f64,
    /// Absent when the ground truth has no positives.
    pub sensitivity: Option<f64>,
    /// Absent when the ground truth has no negatives.
    pub specificity: Option<f64>,
    pub overlap_at_k: f64,
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub images: u64,
}

impl SelectorMetrics {
    fn finish(mut self, overlap_sum: f64) -> Self {
        let total = self.true_pos + self.true_neg + self.false_pos + self.false_neg;
        let frac = |a: u64, b: u64| if b == 0 { None } else { Some(a as f64 / b as f64) };
        self.per_patch_accuracy = frac(self.true_pos + self.true_neg, total).unwrap_or(0.0);
        self.sensitivity = frac(self.true_pos, self.true_pos + self.false_neg);
        self.specificity = frac(self.true_neg, self.true_neg + self.false_pos);
        self.overlap_at_k = if self.images == 0 { 0.0 } else { overlap_sum / self.images as f64 };
        self
    }

    /// Pool confusion counts over many images; overlap is the per-image mean.
    pub fn aggregate<'a>(items: impl IntoIterator<Item = (&'a [f32], &'a [u8])>, k: usize) -> Result<Self> {
        let mut m = SelectorMetrics::default();
        let mut overlap_sum = 0.0;
        for (logits, gt) in items {
            if logits.len() != gt.len() {
                return Err(Error::shape(
                    "selection_metrics",
                    format!("{} logits vs {} targets", logits.len(), gt.len()),
                ));
            }
            for (&z, &y) in logits.iter().zip(gt) {
                // sigmoid(z) >= 0.5  <=>  z >= 0
                match (z >= 0.0, y == 1) {
                    (true, true) => m.true_pos += 1,
                    (false, false) => m.true_neg += 1,
                    (true, false) => m.false_pos += 1,
                    (false, true) => m.false_neg += 1,
                }
            }
            let picked = predict_topk(logits, k)?;
            let hits = picked.iter().filter(|&&i| gt[i] == 1).count();
            overlap_sum += hits as f64 / k as f64;
            m.images += 1;
        }
        Ok(m.finish(overlap_sum))
    }
}

pub fn selection_metrics(pred_logits: &[f32], gt_multi_hot: &[u8], k: usize) -> Result<SelectorMetrics> {
    SelectorMetrics::aggregate([(pred_logits, gt_multi_hot)], k)
}
