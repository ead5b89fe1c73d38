use super::ImageRecord;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rollout::{heat_from_attention, topk_indices};
use crate::tape::Tape;
use crate::vit::{attention_stack, forward_batch, ViTConfig};

/// Teacher-derived training target for the selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaccadeRecord {
    pub image_id: u32,
    pub label: u16,
    /// Strictly ascending patch indices.
    pub indices: Vec<usize>,
    /// Length-N indicator with ones exactly at `indices`.
    pub multi_hot: Vec<u8>,
}

impl SaccadeRecord {
    pub fn new(image_id: u32, label: u16, indices: Vec<usize>, num_patches: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "image {image_id}: indices {indices:?} are not strictly ascending"
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= num_patches {
                return Err(Error::InvalidArgument(format!(
                    "image {image_id}: index {last} >= {num_patches} patches"
                )));
            }
        }
        let mut multi_hot = vec![0u8; num_patches];
        for &i in &indices {
            multi_hot[i] = 1;
        }
        Ok(Self {
            image_id,
            label,
            indices,
            multi_hot,
        })
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn num_patches(&self) -> usize {
        self.multi_hot.len()
    }

    /// Re-check the index / multi-hot consistency invariant.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = SaccadeRecord::new(self.image_id, self.label, self.indices.clone(), self.num_patches())?;
        if rebuilt.multi_hot != self.multi_hot {
            return Err(Error::InvalidArgument(format!(
                "image {}: multi-hot vector disagrees with indices",
                self.image_id
            )));
        }
        Ok(())
    }
}

const TARGET_BATCH: usize = 32;

/// Run the teacher on every (un-augmented) image and keep the top-k rollout patches.
pub fn build_saccade_targets(
    teacher: &ParamSet,
    config: &ViTConfig,
    images: &[&ImageRecord],
    k: usize,
) -> Result<Vec<SaccadeRecord>> {
    config.validate()?;
    let n = config.num_patches();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(TARGET_BATCH) {
        let mut tape = Tape::<f32>::new();
        let bound = teacher.bind(&mut tape, false);
        let pixels: Vec<_> = chunk.iter().map(|r| &r.pixels).collect();
        let fwd = forward_batch(&mut tape, &bound, config, &pixels, None).map_err(|e| Error::Image {
            image_id: chunk[0].id,
            source: Box::new(e),
        })?;
        for (b, rec) in chunk.iter().enumerate() {
            let wrap = |e| Error::Image {
                image_id: rec.id,
                source: Box::new(e),
            };
            let stack = attention_stack(&tape, &fwd.attention, config.heads, b).map_err(wrap)?;
            let heat = heat_from_attention(&stack).map_err(wrap)?;
            let indices = topk_indices(&heat.heat, k).map_err(wrap)?;
            let label = u16::try_from(rec.label)
                .map_err(|_| wrap(Error::InvalidArgument(format!("label {} exceeds u16", rec.label))))?;
            out.push(SaccadeRecord::new(rec.id, label, indices, n)?);
        }
    }
    Ok(out)
}

/// Fraction of the selected patches that touch the object mask.
pub fn mask_overlap(record: &ImageRecord, indices: &[usize], patch: usize) -> Option<f64> {
    let mask = record.mask.as_ref()?;
    let w = record.width();
    let grid = w / patch;
    if indices.is_empty() {
        return Some(0.0);
    }
    let hits = indices
        .iter()
        .filter(|&&i| {
            let (gy, gx) = (i / grid, i % grid);
            (0..patch).any(|y| (0..patch).any(|x| mask[(gy * patch + y) * w + gx * patch + x]))
        })
        .count();
    Some(hits as f64 / indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes;
    use crate::rng::Rng;
    use crate::vit::{init_params, PeMode};

    #[test]
    fn record_invariants() {
        let r = SaccadeRecord::new(3, 1, vec![0, 2, 5], 8).unwrap();
        assert_eq!(r.multi_hot, vec![1, 0, 1, 0, 0, 1, 0, 0]);
        assert!(SaccadeRecord::new(3, 1, vec![2, 2], 8).is_err());
        assert!(SaccadeRecord::new(3, 1, vec![3, 1], 8).is_err());
        assert!(SaccadeRecord::new(3, 1, vec![8], 8).is_err());
        let mut bad = r.clone();
        bad.multi_hot[1] = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn targets_have_k_ones_and_are_deterministic() {
        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 8,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            pe_mode: PeMode::Sinusoidal,
            dropout: 0.0,
        };
        let params = init_params(&cfg, &mut Rng::new(0)).unwrap();
        let imgs = gen_shapes(40, 1, 32);
        let refs: Vec<_> = imgs.iter().collect();
        let a = build_saccade_targets(&params, &cfg, &refs, 4).unwrap();
        let b = build_saccade_targets(&params, &cfg, &refs, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        for r in &a {
            assert_eq!(r.multi_hot.iter().map(|&v| v as usize).sum::<usize>(), 4);
        }
        assert!(build_saccade_targets(&params, &cfg, &refs, 17).is_err());
    }

    #[test]
    fn overlap_counts_touching_patches() {
        let mut img = gen_shapes(1, 0, 16).remove(0);
        let mut mask = vec![false; 256];
        mask[0] = true; // patch 0 of a 4x4 grid with P=4
        img.mask = Some(mask);
        assert_eq!(mask_overlap(&img, &[0, 5], 4), Some(0.5));
    }
}
