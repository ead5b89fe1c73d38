//! Vision transformer with pre-norm blocks that exposes its attention maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    Sinusoidal,
    Learned,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default = "default_pe_mode")]
    pub pe_mode: PeMode,
    /// Dropout on residual branches during training. 0 disables it.
    #[serde(default)]
    pub dropout: f32,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_pe_mode() -> PeMode {
    PeMode::Sinusoidal
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.pe_mode == PeMode::Sinusoidal && !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinusoidal embedding needs an even dim, got {}",
                self.dim
            )));
        }
        if self.depth == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, num_classes and mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Post-softmax attention of one forward pass, laid out `L×H×S×S`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: usize,
    pub heads: usize,
    pub seq: usize,
    pub probs: Vec<f32>,
}

impl AttentionStack {
    pub fn new(layers: usize, heads: usize, seq: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != layers * heads * seq * seq || layers == 0 || heads == 0 || seq == 0 {
            return Err(Error::shape(
                "attention_stack",
                format!("{} values for {layers}x{heads}x{seq}x{seq}", probs.len()),
            ));
        }
        Ok(Self {
            layers,
            heads,
            seq,
            probs,
        })
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &[f32] {
        let s2 = self.seq * self.seq;
        let start = (layer * self.heads + head) * s2;
        &self.probs[start..start + s2]
    }

    pub fn get(&self, layer: usize, head: usize, row: usize, col: usize) -> f32 {
        self.matrix(layer, head)[row * self.seq + col]
    }
}

/// Split a `3×H×W` image into row-major `P×P` patches, each flattened channel-major.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("patchify", format!("expected 3xHxW, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}x{w} image is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = 3 * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * pd);
    let px = image.data();
    for gi in 0..gh {
        for gj in 0..gw {
            for c in 0..3 {
                for y in 0..patch {
                    let row = (c * h + gi * patch + y) * w + gj * patch;
                    data.extend_from_slice(&px[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], data)
}

/// Fixed sine/cosine table; row 0 belongs to the CLS position.
pub fn sinusoidal_pe<T: Scalar>(seq: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal embedding needs an even dim, got {dim}"
        )));
    }
    let mut data = vec![T::zero(); seq * dim];
    for pos in 0..seq {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = T::from_f64(angle.sin());
            data[pos * dim + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Tensor::new(vec![seq, dim], data)
}

/// Rows `start..start+len` of a 2-D table.
pub(crate) fn table_rows<T: Scalar>(table: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let d = table.shape()[1];
    Tensor::new(vec![len, d], table.data()[start * d..(start + len) * d].to_vec())
        .expect("row slice of a valid table")
}

// ------------------------------------------------------------------ params

pub(crate) fn init_encoder(params: &mut ParamSet, rng: &mut Rng, dim: usize, depth: usize, mlp_ratio: usize) {
    let hidden = dim * mlp_ratio;
    for l in 0..depth {
        let p = format!("blocks.{l}");
        params.insert(format!("{p}.ln1.g"), Tensor::full(&[dim], 1.0));
        params.insert(format!("{p}.ln1.b"), Tensor::zeros(&[dim]));
        for proj in ["q", "k", "v", "o"] {
            params.insert(format!("{p}.attn.{proj}.w"), normal(rng, &[dim, dim], INIT_STD));
            params.insert(format!("{p}.attn.{proj}.b"), Tensor::zeros(&[dim]));
        }
        params.insert(format!("{p}.ln2.g"), Tensor::full(&[dim], 1.0));
        params.insert(format!("{p}.ln2.b"), Tensor::zeros(&[dim]));
        params.insert(format!("{p}.mlp.fc1.w"), normal(rng, &[dim, hidden], INIT_STD));
        params.insert(format!("{p}.mlp.fc1.b"), Tensor::zeros(&[hidden]));
        params.insert(format!("{p}.mlp.fc2.w"), normal(rng, &[hidden, dim], INIT_STD));
        params.insert(format!("{p}.mlp.fc2.b"), Tensor::zeros(&[dim]));
    }
    params.insert("norm.g", Tensor::full(&[dim], 1.0));
    params.insert("norm.b", Tensor::zeros(&[dim]));
}

pub(crate) fn init_embed_and_head(
    params: &mut ParamSet,
    rng: &mut Rng,
    patch_dim: usize,
    dim: usize,
    classes: usize,
) {
    params.insert("patch_embed.w", normal(rng, &[patch_dim, dim], INIT_STD));
    params.insert("patch_embed.b", Tensor::zeros(&[dim]));
    params.insert("cls", normal(rng, &[dim], INIT_STD));
    params.insert("head.w", normal(rng, &[dim, classes], INIT_STD));
    params.insert("head.b", Tensor::zeros(&[classes]));
}

/// Fresh parameters for a [`ViTConfig`].
pub fn init_params(config: &ViTConfig, rng: &mut Rng) -> Result<ParamSet> {
    config.validate()?;
    let mut params = ParamSet::new();
    init_embed_and_head(&mut params, rng, config.patch_dim(), config.dim, config.num_classes);
    if config.pe_mode == PeMode::Learned {
        params.insert("pos", normal(rng, &[config.seq_len(), config.dim], INIT_STD));
    }
    init_encoder(&mut params, rng, config.dim, config.depth, config.mlp_ratio);
    Ok(params)
}

// ----------------------------------------------------------------- forward

/// Settings shared by every transformer encoder in this crate.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderShape {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub dropout: f32,
}

/// Mutable state for a training-mode forward pass.
pub struct TrainMode<'a> {
    pub rng: &'a mut Rng,
}

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.w"))?)?;
    tape.add_broadcast(y, p.var(&format!("{name}.b"))?)
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f32, train: &mut Option<TrainMode<'_>>) -> Result<Var> {
    let Some(mode) = train.as_mut() else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate as f64;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if mode.rng.bernoulli(keep) { T::from_f64(1.0 / keep) } else { T::zero() })
        .collect();
    tape.mul_constant(x, Tensor::new(shape, mask)?)
}

/// Patch embeddings `[B,N,patch_dim] -> [B,N,D]`.
pub(crate) fn embed_patches<T: Scalar>(tape: &mut Tape<T>, p: &Bound, patches: Var) -> Result<Var> {
    linear(tape, p, "patch_embed", patches)
}

/// Stack of per-image patch matrices as one `[B,N,patch_dim]` constant.
pub(crate) fn patch_batch<T: Scalar>(tape: &mut Tape<T>, images: &[&Tensor<f32>], patch: usize) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for img in images {
        let pt = patchify(&img.cast::<T>(), patch)?;
        match dims {
            None => dims = Some((pt.shape()[0], pt.shape()[1])),
            Some(d) if d != (pt.shape()[0], pt.shape()[1]) => {
                return Err(Error::shape("patch_batch", "images differ in size"));
            }
            _ => {}
        }
        data.extend_from_slice(pt.data());
    }
    let (n, pd) = dims.expect("non-empty batch");
    Ok(tape.constant(Tensor::new(vec![images.len(), n, pd], data)?))
}

/// Pre-norm transformer encoder over `x: [B,S,D]`, final norm included.
/// Returns the normed sequence and each layer's `[B·H,S,S]` attention var.
pub(crate) fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    shape: EncoderShape,
    mut x: Var,
    train: &mut Option<TrainMode<'_>>,
) -> Result<(Var, Vec<Var>)> {
    let dh = shape.dim / shape.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut attn = Vec::with_capacity(shape.depth);
    for l in 0..shape.depth {
        let b = format!("blocks.{l}");
        let h = tape.layer_norm(x, p.var(&format!("{b}.ln1.g"))?, p.var(&format!("{b}.ln1.b"))?)?;
        let q = linear(tape, p, &format!("{b}.attn.q"), h)?;
        let k = linear(tape, p, &format!("{b}.attn.k"), h)?;
        let v = linear(tape, p, &format!("{b}.attn.v"), h)?;
        let q = tape.split_heads(q, shape.heads)?;
        let k = tape.split_heads(k, shape.heads)?;
        let v = tape.split_heads(v, shape.heads)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax(scores)?;
        attn.push(probs);
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.merge_heads(ctx, shape.heads)?;
        let out = linear(tape, p, &format!("{b}.attn.o"), ctx)?;
        let out = dropout(tape, out, shape.dropout, train)?;
        x = tape.add(x, out)?;

        let h = tape.layer_norm(x, p.var(&format!("{b}.ln2.g"))?, p.var(&format!("{b}.ln2.b"))?)?;
        let h = linear(tape, p, &format!("{b}.mlp.fc1"), h)?;
        let h = tape.gelu(h)?;
        let h = linear(tape, p, &format!("{b}.mlp.fc2"), h)?;
        let h = dropout(tape, h, shape.dropout, train)?;
        x = tape.add(x, h)?;
    }
    let x = tape.layer_norm(x, p.var("norm.g")?, p.var("norm.b")?)?;
    Ok((x, attn))
}

/// CLS row through the linear head.
pub(crate) fn classify<T: Scalar>(tape: &mut Tape<T>, p: &Bound, encoded: Var) -> Result<Var> {
    let cls = tape.select_row(encoded, 0)?;
    linear(tape, p, "head", cls)
}

/// Prepend the CLS token (plus its positional row when given) to `[B,n,D]`.
pub(crate) fn prepend_cls<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var, cls_pos: Option<Var>) -> Result<Var> {
    let mut cls = p.var("cls")?;
    if let Some(pos) = cls_pos {
        cls = tape.add(cls, pos)?;
    }
    tape.prepend_row(x, cls)
}

/// Output of a batched forward pass.
pub struct ForwardOut {
    pub logits: Var,
    /// Per layer, `[B·H,S,S]` attention probabilities.
    pub attention: Vec<Var>,
}

/// Batched ViT forward on a tape. Parameters must already be bound.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &ViTConfig,
    images: &[&Tensor<f32>],
    mut train: Option<TrainMode<'_>>,
) -> Result<ForwardOut> {
    config.validate()?;
    for img in images {
        if img.shape() != [3, config.image_size, config.image_size] {
            return Err(Error::shape(
                "vit_forward",
                format!("image {:?} for image_size {}", img.shape(), config.image_size),
            ));
        }
    }
    let n = config.num_patches();
    let patches = patch_batch(tape, images, config.patch_size)?;
    let mut x = embed_patches(tape, p, patches)?;
    let cls_pos = match config.pe_mode {
        PeMode::Sinusoidal => {
            let table = sinusoidal_pe::<T>(n + 1, config.dim)?;
            let rest = tape.constant(table_rows(&table, 1, n));
            x = tape.add_broadcast(x, rest)?;
            Some(tape.constant(table_rows(&table, 0, 1).reshape(&[config.dim])?))
        }
        PeMode::Learned => {
            // Split the learned table into its CLS row and patch rows on the tape
            // so both receive gradients.
            let pos = p.var("pos")?;
            let pos3 = tape.reshape(pos, &[1, n + 1, config.dim])?;
            let cls_idx = vec![vec![0]];
            let patch_idx = vec![(1..=n).collect::<Vec<_>>()];
            let cls_row = tape.gather_rows(pos3, &cls_idx)?;
            let cls_row = tape.reshape(cls_row, &[config.dim])?;
            let rest = tape.gather_rows(pos3, &patch_idx)?;
            let rest = tape.reshape(rest, &[n, config.dim])?;
            x = tape.add_broadcast(x, rest)?;
            Some(cls_row)
        }
        PeMode::None => None,
    };
    let x = prepend_cls(tape, p, x, cls_pos)?;
    let shape = EncoderShape {
        depth: config.depth,
        heads: config.heads,
        dim: config.dim,
        dropout: config.dropout,
    };
    let (encoded, attention) = encode(tape, p, shape, x, &mut train)?;
    let logits = classify(tape, p, encoded)?;
    Ok(ForwardOut { logits, attention })
}

/// Extract batch item `b`'s attention stack from the per-layer tape vars.
pub fn attention_stack<T: Scalar>(tape: &Tape<T>, attention: &[Var], heads: usize, b: usize) -> Result<AttentionStack> {
    let seq = tape.shape(attention[0])[1];
    let s2 = seq * seq;
    let mut probs = Vec::with_capacity(attention.len() * heads * s2);
    for &layer in attention {
        let data = tape.value(layer).data();
        let start = b * heads * s2;
        probs.extend(data[start..start + heads * s2].iter().map(|v| v.as_f64() as f32));
    }
    AttentionStack::new(attention.len(), heads, seq, probs)
}

/// Single-image inference: logits and the full attention stack.
pub fn vit_forward(image: &Tensor<f32>, params: &ParamSet, config: &ViTConfig) -> Result<(Tensor<f32>, AttentionStack)> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_batch(&mut tape, &bound, config, &[image], None)?;
    let logits = tape.value(out.logits).clone().reshape(&[config.num_classes])?;
    let stack = attention_stack(&tape, &out.attention, config.heads, 0)?;
    Ok((logits, stack))
}

/// Batched inference returning `[B, C]` logits.
pub fn predict_logits(images: &[&Tensor<f32>], params: &ParamSet, config: &ViTConfig) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_batch(&mut tape, &bound, config, images, None)?;
    Ok(tape.value(out.logits).clone())
}
