//! The student transformer that attends only over the selected patches.

use serde::{Deserialize, Serialize};

use crate::data::SaccadeRecord;
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamSet};
use crate::rng::Rng;
use crate::san::{predict_topk, selector_forward, SelectorConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{
    classify, embed_patches, encode, init_embed_and_head, init_encoder, patch_batch, prepend_cls, sinusoidal_pe,
    table_rows, EncoderShape, ForwardOut, TrainMode, ViTConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeVariant {
    /// Sinusoidal table over the full grid, added before slicing.
    #[default]
    SinFullPreslice,
    /// Learned table with `k + 1` slots, added after slicing.
    LearnedPostslice,
    /// No positional information; the selection is a set.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexSource {
    #[default]
    San,
    GroundTruth,
}

/// `base.pe_mode` is ignored; `pe_variant` decides positional information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanVitConfig {
    pub base: ViTConfig,
    pub k: usize,
    #[serde(default)]
    pub pe_variant: PeVariant,
    #[serde(default)]
    pub index_source: IndexSource,
}

impl SanVitConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let n = self.base.num_patches();
        if self.k == 0 || self.k > n {
            return Err(Error::Config(format!("k = {} outside 1..={n}", self.k)));
        }
        Ok(())
    }

    /// Attended sequence length, CLS included.
    pub fn seq_len(&self) -> usize {
        self.k + 1
    }

    fn encoder(&self) -> EncoderShape {
        EncoderShape {
            depth: self.base.depth,
            heads: self.base.heads,
            dim: self.base.dim,
            dropout: self.base.dropout,
        }
    }
}

pub fn init_params(config: &SanVitConfig, rng: &mut Rng) -> Result<ParamSet> {
    config.validate()?;
    let b = &config.base;
    let mut params = ParamSet::new();
    init_embed_and_head(&mut params, rng, b.patch_dim(), b.dim, b.num_classes);
    if config.pe_variant == PeVariant::LearnedPostslice {
        params.insert("pos", normal(rng, &[config.k + 1, b.dim], 0.02));
    }
    init_encoder(&mut params, rng, b.dim, b.depth, b.mlp_ratio);
    Ok(params)
}

/// Rows `indices[b]` of each `[N,D]` item in `embedded: [B,N,D]`.
/// Gradients scatter back to the chosen rows only.
pub fn gather_patches<T: Scalar>(tape: &mut Tape<T>, embedded: Var, indices: &[Vec<usize>]) -> Result<Var> {
    tape.gather_rows(embedded, indices)
}

/// Batched student forward with one index list per image.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &SanVitConfig,
    images: &[&Tensor<f32>],
    indices: &[Vec<usize>],
    mut train: Option<TrainMode<'_>>,
) -> Result<ForwardOut> {
    config.validate()?;
    let base = &config.base;
    if images.len() != indices.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} index lists",
            images.len(),
            indices.len()
        )));
    }
    for (img, idx) in images.iter().zip(indices) {
        if img.shape() != [3, base.image_size, base.image_size] {
            return Err(Error::shape(
                "sanvit_forward",
                format!("image {:?} for image_size {}", img.shape(), base.image_size),
            ));
        }
        if idx.len() != config.k {
            return Err(Error::InvalidArgument(format!(
                "{} indices supplied for k = {}",
                idx.len(),
                config.k
            )));
        }
    }
    let n = base.num_patches();
    let patches = patch_batch(tape, images, base.patch_size)?;
    let mut x = embed_patches(tape, p, patches)?;
    let mut cls_pos = None;
    if config.pe_variant == PeVariant::SinFullPreslice {
        let table = sinusoidal_pe::<T>(n + 1, base.dim)?;
        let rest = tape.constant(table_rows(&table, 1, n));
        x = tape.add_broadcast(x, rest)?;
        cls_pos = Some(tape.constant(table_rows(&table, 0, 1).reshape(&[base.dim])?));
    }
    let mut x = gather_patches(tape, x, indices)?;
    if config.pe_variant == PeVariant::LearnedPostslice {
        let k = config.k;
        let pos3 = tape.reshape(p.var("pos")?, &[1, k + 1, base.dim])?;
        let cls_row = tape.gather_rows(pos3, &[vec![0]])?;
        cls_pos = Some(tape.reshape(cls_row, &[base.dim])?);
        let rest = tape.gather_rows(pos3, &[(1..=k).collect()])?;
        let rest = tape.reshape(rest, &[k, base.dim])?;
        x = tape.add_broadcast(x, rest)?;
    }
    let x = prepend_cls(tape, p, x, cls_pos)?;
    let (encoded, attention) = encode(tape, p, config.encoder(), x, &mut train)?;
    let logits = classify(tape, p, encoded)?;
    Ok(ForwardOut { logits, attention })
}

/// Single-image inference, `[C]` logits.
pub fn sanvit_forward(image: &Tensor<f32>, indices: &[usize], params: &ParamSet, config: &SanVitConfig) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_batch(&mut tape, &bound, config, &[image], &[indices.to_vec()], None)?;
    tape.value(out.logits).clone().reshape(&[config.base.num_classes])
}

/// Batched inference, `[B, C]` logits.
pub fn predict_logits(
    images: &[&Tensor<f32>],
    indices: &[Vec<usize>],
    params: &ParamSet,
    config: &SanVitConfig,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_batch(&mut tape, &bound, config, images, indices, None)?;
    Ok(tape.value(out.logits).clone())
}

/// A trained selector and its config.
#[derive(Debug, Clone, Copy)]
pub struct SelectorRef<'a> {
    pub params: &'a ParamSet,
    pub config: &'a SelectorConfig,
}

/// The k patch indices the student should attend to for `image`.
pub fn resolve_indices(
    image: &Tensor<f32>,
    config: &SanVitConfig,
    selector: Option<SelectorRef<'_>>,
    record: Option<&SaccadeRecord>,
) -> Result<Vec<usize>> {
    match config.index_source {
        IndexSource::San => {
            let sel = selector.ok_or_else(|| Error::InvalidArgument("san index source needs selector parameters".into()))?;
            if sel.config.num_patches != config.base.num_patches() {
                return Err(Error::Config(format!(
                    "selector emits {} logits but the student grid has {} patches",
                    sel.config.num_patches,
                    config.base.num_patches()
                )));
            }
            let logits = selector_forward(image, sel.params, sel.config)?;
            predict_topk(logits.data(), config.k)
        }
        IndexSource::GroundTruth => {
            let rec = record.ok_or_else(|| Error::InvalidArgument("ground_truth index source needs a saccade record".into()))?;
            if rec.k() != config.k || rec.num_patches() != config.base.num_patches() {
                return Err(Error::Config(format!(
                    "record has k = {} over {} patches; config wants k = {} over {}",
                    rec.k(),
                    rec.num_patches(),
                    config.k,
                    config.base.num_patches()
                )));
            }
            Ok(rec.indices.clone())
        }
    }
}
