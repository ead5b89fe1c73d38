//! Attention rollout, CLS heat extraction and top-k patch selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::AttentionStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFusion {
    #[default]
    Mean,
    Max,
    Min,
}

/// Head-reduced attention, `L×S×S`, kept in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedStack {
    pub layers: usize,
    pub seq: usize,
    pub data: Vec<f64>,
}

impl FusedStack {
    pub fn new(layers: usize, seq: usize, data: Vec<f64>) -> Result<Self> {
        if layers == 0 || seq == 0 || data.len() != layers * seq * seq {
            return Err(Error::shape(
                "fused_stack",
                format!("{} values for {layers}x{seq}x{seq}", data.len()),
            ));
        }
        Ok(Self { layers, seq, data })
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let s2 = self.seq * self.seq;
        &self.data[l * s2..(l + 1) * s2]
    }
}

/// Reduce the head axis of every layer.
///
/// Mean keeps rows stochastic; max and min generally do not, and rollout
/// re-normalizes them.
pub fn fuse_heads(attn: &AttentionStack, mode: HeadFusion) -> FusedStack {
    let s2 = attn.seq * attn.seq;
    let mut data = Vec::with_capacity(attn.layers * s2);
    for l in 0..attn.layers {
        for e in 0..s2 {
            let vals = (0..attn.heads).map(|h| attn.matrix(l, h)[e] as f64);
            let v = match mode {
                HeadFusion::Mean => vals.sum::<f64>() / attn.heads as f64,
                HeadFusion::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                HeadFusion::Min => vals.fold(f64::INFINITY, f64::min),
            };
            data.push(v);
        }
    }
    FusedStack {
        layers: attn.layers,
        seq: attn.seq,
        data,
    }
}

/// `R = Ã_L · … · Ã_1` with `Ã_l = rownorm(A_l + I)`.
pub fn attention_rollout(fused: &FusedStack) -> Result<Tensor<f64>> {
    let s = fused.seq;
    let mut rollout = identity(s);
    let mut mixed = vec![0.0; s * s];
    let mut next = vec![0.0; s * s];
    for l in 0..fused.layers {
        let a = fused.layer(l);
        for i in 0..s {
            let row = &a[i * s..(i + 1) * s];
            let mass: f64 = row.iter().sum();
            if !(mass > 0.0) || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} row {i} cannot be normalized (sum {mass})"
                )));
            }
            let total = mass + 1.0;
            for j in 0..s {
                let v = row[j] + if i == j { 1.0 } else { 0.0 };
                mixed[i * s + j] = v / total;
            }
        }
        // later layers multiply on the left
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                for m in 0..s {
                    acc += mixed[i * s + m] * rollout[m * s + j];
                }
                next[i * s + j] = acc;
            }
        }
        std::mem::swap(&mut rollout, &mut next);
    }
    Tensor::new(vec![s, s], rollout)
}

fn identity(s: usize) -> Vec<f64> {
    let mut m = vec![0.0; s * s];
    for i in 0..s {
        m[i * s + i] = 1.0;
    }
    m
}

/// Per-patch attribution of the CLS token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub heat: Vec<f64>,
    pub grid: usize,
}

impl HeatMap {
    pub fn new(heat: Vec<f64>) -> Result<Self> {
        let grid = (heat.len() as f64).sqrt().round() as usize;
        if grid == 0 || grid * grid != heat.len() {
            return Err(Error::shape(
                "heatmap",
                format!("{} patches do not form a square grid", heat.len()),
            ));
        }
        Ok(Self { heat, grid })
    }

    /// Row-major `g×g` view.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.heat.chunks(self.grid)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.heat[row * self.grid + col]
    }
}

/// CLS row of the rollout with the CLS column dropped.
pub fn cls_heat(rollout: &Tensor<f64>) -> Result<HeatMap> {
    let s = rollout.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
        return Err(Error::shape("cls_heat", format!("{s:?}")));
    }
    HeatMap::new(rollout.data()[1..s[1]].to_vec())
}

/// Indices of the `k` largest values, ascending; ties go to the lower index.
pub fn topk_indices<T: Copy + Into<f64>>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb): (f64, f64) = (values[a].into(), values[b].into());
        vb.total_cmp(&va).then(a.cmp(&b))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// fuse (mean) → rollout → CLS heat, the teacher's saccade map for one image.
pub fn heat_from_attention(attn: &AttentionStack) -> Result<HeatMap> {
    cls_heat(&attention_rollout(&fuse_heads(attn, HeadFusion::Mean))?)
}
