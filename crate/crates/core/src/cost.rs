//! Exact parameter, FLOP and attention-comparison accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::san::SelectorConfig;
use crate::sanvit::{PeVariant, SanVitConfig};
use crate::vit::{PeMode, ViTConfig};

pub const COUNTING_NOTES: &str = "1 multiply-accumulate = 2 FLOPs; only matmuls and convolutions are counted \
(bias adds, normalisation, softmax, activations and pooling are excluded); one forward pass of one image; \
params include every bias, LayerNorm gain/shift (the final norm too) and learned embedding; \
attention_comparisons is seq^2 for a single layer and head, over patch tokens only";

/// Query-key score entries in one attention map.
pub fn attention_comparisons(seq: u64) -> u64 {
    seq * seq
}

/// `[m,k]·[k,n]`.
pub fn matmul_flops(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n
}

pub fn linear_params(inputs: u64, outputs: u64) -> u64 {
    inputs * outputs + outputs
}

/// Which model a report describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Vit(ViTConfig),
    Selector(SelectorConfig),
    /// Student plus, when given, the selector that feeds it.
    Sanvit {
        student: SanVitConfig,
        selector: Option<SelectorConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_total: u64,
    pub params_by_component: BTreeMap<String, u64>,
    pub flops_total: u64,
    pub flops_by_component: BTreeMap<String, u64>,
    /// Per layer and head, patch tokens only; 0 for the CNN.
    pub attention_comparisons: u64,
    /// Tokens the transformer attends over (CLS included); 0 for the CNN.
    pub seq_len: u64,
    pub notes: String,
}

/// FLOP components that belong to the transformer encoder.
const TRANSFORMER_PARTS: [&str; 5] = [
    "attention_qkv",
    "attention_scores",
    "attention_values",
    "attention_out",
    "mlp",
];

impl CostReport {
    fn from_parts(params: BTreeMap<String, u64>, flops: BTreeMap<String, u64>, seq: u64) -> Self {
        Self {
            params_total: params.values().sum(),
            params_by_component: params,
            flops_total: flops.values().sum(),
            flops_by_component: flops,
            attention_comparisons: if seq > 0 { attention_comparisons(seq - 1) } else { 0 },
            seq_len: seq,
            notes: COUNTING_NOTES.to_string(),
        }
    }

    /// Encoder-only FLOPs (attention plus MLP over all layers).
    pub fn transformer_flops(&self) -> u64 {
        TRANSFORMER_PARTS
            .iter()
            .filter_map(|c| self.flops_by_component.get(*c))
            .sum()
    }
}

fn encoder_params(params: &mut BTreeMap<String, u64>, dim: u64, depth: u64, mlp_ratio: u64) {
    let hidden = dim * mlp_ratio;
    params.insert("attention".into(), depth * 4 * linear_params(dim, dim));
    params.insert("mlp".into(), depth * (linear_params(dim, hidden) + linear_params(hidden, dim)));
    params.insert("layer_norms".into(), depth * 4 * dim + 2 * dim);
}

/// Transformer FLOPs at sequence length `seq`, embedding over `embedded` patches.
fn transformer_flops(flops: &mut BTreeMap<String, u64>, base: &ViTConfig, seq: u64, embedded: u64) {
    let d = base.dim as u64;
    let l = base.depth as u64;
    let hidden = d * base.mlp_ratio as u64;
    flops.insert("patch_embed".into(), matmul_flops(embedded, base.patch_dim() as u64, d));
    flops.insert("attention_qkv".into(), l * 3 * matmul_flops(seq, d, d));
    // heads split D, so scores and values cost the same as one full-width head
    flops.insert("attention_scores".into(), l * matmul_flops(seq, d, seq));
    flops.insert("attention_values".into(), l * matmul_flops(seq, seq, d));
    flops.insert("attention_out".into(), l * matmul_flops(seq, d, d));
    flops.insert("mlp".into(), l * (matmul_flops(seq, d, hidden) + matmul_flops(seq, hidden, d)));
    flops.insert("head".into(), matmul_flops(1, d, base.num_classes as u64));
}

fn vit_report(config: &ViTConfig, seq_override: Option<u64>) -> Result<CostReport> {
    config.validate()?;
    let d = config.dim as u64;
    let n = config.num_patches() as u64;
    let mut params = BTreeMap::new();
    params.insert("patch_embed".to_string(), linear_params(config.patch_dim() as u64, d));
    params.insert("cls".into(), d);
    let pos = if config.pe_mode == PeMode::Learned { (n + 1) * d } else { 0 };
    params.insert("pos".into(), pos);
    encoder_params(&mut params, d, config.depth as u64, config.mlp_ratio as u64);
    params.insert("head".into(), linear_params(d, config.num_classes as u64));
    let seq = seq_override.unwrap_or(n + 1);
    let mut flops = BTreeMap::new();
    transformer_flops(&mut flops, config, seq, n);
    Ok(CostReport::from_parts(params, flops, seq))
}

fn selector_parts(config: &SelectorConfig) -> Result<(BTreeMap<String, u64>, BTreeMap<String, u64>)> {
    config.validate()?;
    let mut conv_params = 0;
    let mut conv_flops = 0;
    for layer in config.conv_layers() {
        let (ci, co, k) = (layer.c_in as u64, layer.c_out as u64, layer.kernel as u64);
        let out = layer.out_size as u64;
        conv_params += co * (ci * k * k + 1);
        conv_flops += 2 * co * out * out * ci * k * k;
    }
    let c = config.final_channels() as u64;
    let n = config.num_patches as u64;
    let params = BTreeMap::from([
        ("convs".to_string(), conv_params),
        ("head".to_string(), linear_params(c, n)),
    ]);
    let flops = BTreeMap::from([
        ("convs".to_string(), conv_flops),
        ("head".to_string(), matmul_flops(1, c, n)),
    ]);
    Ok((params, flops))
}

fn sanvit_report(student: &SanVitConfig, selector: Option<&SelectorConfig>, seq_override: Option<u64>) -> Result<CostReport> {
    student.validate()?;
    let base = &student.base;
    let d = base.dim as u64;
    let k = student.k as u64;
    let mut params = BTreeMap::new();
    params.insert("patch_embed".to_string(), linear_params(base.patch_dim() as u64, d));
    params.insert("cls".into(), d);
    let pos = if student.pe_variant == PeVariant::LearnedPostslice { (k + 1) * d } else { 0 };
    params.insert("pos".into(), pos);
    encoder_params(&mut params, d, base.depth as u64, base.mlp_ratio as u64);
    params.insert("head".into(), linear_params(d, base.num_classes as u64));
    let seq = seq_override.unwrap_or(k + 1);
    let mut flops = BTreeMap::new();
    transformer_flops(&mut flops, base, seq, base.num_patches() as u64);
    if let Some(sel) = selector {
        if sel.num_patches != base.num_patches() {
            return Err(Error::Config(format!(
                "selector emits {} logits but the student grid has {} patches",
                sel.num_patches,
                base.num_patches()
            )));
        }
        let (sp, sf) = selector_parts(sel)?;
        for (name, v) in sp {
            params.insert(format!("selector.{name}"), v);
        }
        for (name, v) in sf {
            flops.insert(format!("selector.{name}"), v);
        }
    }
    Ok(CostReport::from_parts(params, flops, seq))
}

/// Exact counts at the model's own sequence length.
pub fn count_params(model: &ModelSpec) -> Result<CostReport> {
    count_flops(model, None)
}

/// Exact counts with the transformer sequence length optionally replaced
/// (CLS included). Ignored for the CNN.
pub fn count_flops(model: &ModelSpec, seq_len_override: Option<u64>) -> Result<CostReport> {
    if seq_len_override == Some(0) {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    match model {
        ModelSpec::Vit(c) => vit_report(c, seq_len_override),
        ModelSpec::Selector(c) => {
            let (p, f) = selector_parts(c)?;
            Ok(CostReport::from_parts(p, f, 0))
        }
        ModelSpec::Sanvit { student, selector } => sanvit_report(student, selector.as_ref(), seq_len_override),
    }
}

/// Headline efficiency figures for a student against a full-attention baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    /// Patch-only comparison ratio, `N² / k²`.
    pub comparison_ratio: f64,
    pub transformer_flop_fraction: f64,
    pub pipeline_flop_fraction: f64,
}

pub fn reduction(baseline: &CostReport, student: &CostReport) -> Reduction {
    let frac = |a: u64, b: u64| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    Reduction {
        comparison_ratio: frac(baseline.attention_comparisons, student.attention_comparisons),
        transformer_flop_fraction: frac(student.transformer_flops(), baseline.transformer_flops()),
        pipeline_flop_fraction: frac(student.flops_total, baseline.flops_total),
    }
}
